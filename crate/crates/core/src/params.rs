//! Named parameter storage, deterministic initialization and the forward
//! context that binds stored parameters onto a [`Tape`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng::{RngStream, DROPOUT_STREAM, INIT_STREAM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct Entry<T> {
    pub tensor: Arc<Tensor<T>>,
    /// Buffers (e.g. batch-norm running statistics) are not trainable and
    /// are excluded from parameter counts.
    pub trainable: bool,
}

/// Ordered map from dotted parameter path to tensor.
#[derive(Clone)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.entries.insert_full(name.to_string(), Entry { tensor: Arc::new(tensor), trainable });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].tensor)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Entry<T>)> {
        self.entries.iter().enumerate().map(|(i, (k, e))| (ParamId(i), k.as_str(), e))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.shape() != tensor.shape() {
            return Err(dim_err!("cannot replace {:?} with {:?}", entry.tensor.shape(), tensor.shape()));
        }
        entry.tensor = Arc::new(tensor);
        Ok(())
    }

    /// Mutable access, cloning the buffer if it is shared.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].tensor)
    }

    /// Total trainable scalars whose path starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|(k, e)| e.trainable && path_has_prefix(k, prefix)).map(|(_, e)| e.tensor.numel() as u64).sum()
    }

    /// Copy with every tensor converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), Entry { tensor: Arc::new(e.tensor.cast()), trainable: e.trainable }))
                .collect(),
        }
    }

    /// Overwrites every trainable tensor with `N(0, std^2)` draws.
    ///
    /// Freshly initialized networks sit at symmetric points (unit gains, zero
    /// biases) that hide bugs from gradient checks; this moves them off.
    pub fn randomize(&mut self, rng: &mut RngStream, std: f64) {
        for e in self.entries.values_mut() {
            if e.trainable {
                let t = Arc::make_mut(&mut e.tensor);
                for v in t.data_mut() {
                    *v = T::from_f64_lossy(rng.normal() * std);
                }
            }
        }
    }
}

/// `true` when `path` equals `prefix` or lies beneath it in the dotted tree.
pub fn path_has_prefix(path: &str, prefix: &str) -> bool {
    prefix.is_empty() || path == prefix || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'.'))
}

pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Allocates named parameters with deterministic initial values.
///
/// All draws come from the init stream of the seed, in allocation order.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: RngStream,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: RngStream::new(seed, INIT_STREAM) }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, T::from_f64_lossy(value)), trainable)
    }

    /// Truncated normal (cut at two standard deviations).
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.trunc_normal(std))).collect();
        self.store.insert(name, Tensor::new(shape, data)?, true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.normal() * std)).collect();
        self.store.insert(name, Tensor::new(shape, data)?, true)
    }
}

/// Per-forward state: which tape to record on, which parameters to read,
/// and the dropout stream.
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    bound: RefCell<HashMap<ParamId, Var>>,
    rng: RefCell<RngStream>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::with_rng(tape, store, false, RngStream::new(0, DROPOUT_STREAM))
    }

    pub fn with_rng(tape: &'a Tape<T>, store: &'a ParamStore<T>, training: bool, rng: RngStream) -> Self {
        Self { tape, store, training, bound: RefCell::new(HashMap::new()), rng: RefCell::new(rng) }
    }

    /// The tape variable for a stored tensor, created on first use.
    pub fn param(&self, id: ParamId) -> Var {
        *self.bound.borrow_mut().entry(id).or_insert_with(|| self.tape.leaf_shared(self.store.get_shared(id), self.store.is_trainable(id)))
    }

    /// Parameters read so far, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<(ParamId, Var)> = self.bound.borrow().iter().map(|(&p, &v)| (p, v)).collect();
        v.sort();
        v
    }

    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, &mut self.rng.borrow_mut(), self.training)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_matching_respects_path_segments() {
        assert!(path_has_prefix("stage1.block0.ssa.q.weight", "stage1.block0"));
        assert!(!path_has_prefix("stage10.block0", "stage1"));
        assert!(path_has_prefix("anything", ""));
    }

    #[test]
    fn builder_is_deterministic() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut b = Builder::new(&mut store, 9);
            b.trunc_normal("a", &[4, 4], 0.02).unwrap();
            b.normal("b", &[3], 1.0).unwrap();
            store
        };
        let (s1, s2) = (build(), build());
        for id in s1.ids() {
            let bits = |s: &ParamStore<f32>| s.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&s1), bits(&s2));
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::zeros(&[1]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn buffers_are_not_counted() {
        let mut store = ParamStore::<f64>::new();
        store.insert("bn.weight", Tensor::zeros(&[4]), true).unwrap();
        store.insert("bn.running_mean", Tensor::zeros(&[4]), false).unwrap();
        assert_eq!(store.count_trainable("bn"), 4);
    }

    #[test]
    fn ctx_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::ones(&[2]), true).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        assert_eq!(ctx.param(id), ctx.param(id));
        assert!(tape.requires_grad(ctx.param(id)));
        assert_eq!(ctx.bound_params().len(), 1);
    }
}
