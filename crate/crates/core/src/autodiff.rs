//! Operation tape with reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]. Nodes are created in
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//!
//! A tape runs in one of three [`Mode`]s. `Grad` records everything needed
//! for a backward pass, `Inference` only computes values, and `ShapeOnly`
//! skips arithmetic entirely and just propagates shapes. All three modes
//! count multiply-accumulates, which is what the cost model is built on.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom, NormCache};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{check_rank, numel_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Grad,
    Inference,
    ShapeOnly,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Value<T> {
    Data(Arc<Tensor<T>>),
    Meta(Vec<usize>),
}

impl<T: Scalar> Value<T> {
    fn shape(&self) -> &[usize] {
        match self {
            Value::Data(t) => t.shape(),
            Value::Meta(s) => s,
        }
    }
}

enum Op<T> {
    Leaf,
    Untracked,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool { x: Var, k: usize, stride: usize },
    GlobalAvgPool(Var),
    ScaleChannels { x: Var, s: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, g: Var, b: Var, cache: NormCache<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Value<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Default)]
struct MacLedger {
    scopes: Vec<String>,
    by_scope: IndexMap<String, u64>,
    total: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Pops a MAC-accounting scope when dropped.
pub struct ScopeGuard<'a, T> {
    tape: &'a Tape<T>,
}

impl<T> Drop for ScopeGuard<'_, T> {
    fn drop(&mut self) {
        self.tape.macs.borrow_mut().scopes.pop();
    }
}

pub struct Tape<T> {
    mode: Mode,
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    macs: RefCell<MacLedger>,
    relu_signature: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(dim_err!("{op}: shape mismatch {a:?} vs {b:?}"));
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Self::with_mode(Mode::Grad)
    }

    pub fn inference() -> Self {
        Self::with_mode(Mode::Inference)
    }

    pub fn shape_only() -> Self {
        Self::with_mode(Mode::ShapeOnly)
    }

    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            macs: RefCell::new(MacLedger::default()),
            relu_signature: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // ---- leaves and accessors -------------------------------------------

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(t), requires_grad)
    }

    pub fn leaf_shared(&self, t: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let value = match self.mode {
            Mode::ShapeOnly => Value::Meta(t.shape().to_vec()),
            _ => Value::Data(t),
        };
        self.push_node(value, requires_grad && self.mode == Mode::Grad, Op::Leaf)
    }

    /// Leaf holding zeros of `shape`; in shape-only mode nothing is allocated.
    pub fn placeholder(&self, shape: &[usize], requires_grad: bool) -> Result<Var> {
        check_rank(shape)?;
        if self.mode == Mode::ShapeOnly {
            return Ok(self.push_node(Value::Meta(shape.to_vec()), false, Op::Leaf));
        }
        Ok(self.leaf(Tensor::zeros(shape), requires_grad))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn value(&self, v: Var) -> Result<Arc<Tensor<T>>> {
        match &self.nodes.borrow()[v.0].value {
            Value::Data(t) => Ok(Arc::clone(t)),
            Value::Meta(_) => Err(Error::State("values are not computed in shape-only mode".into())),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Hash over the sign pattern of every ReLU input seen so far.
    ///
    /// Two evaluations with equal signatures took the same branch at every
    /// ReLU, so a finite difference between them does not straddle a kink.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature.get()
    }

    // ---- MAC accounting ---------------------------------------------------

    /// Attributes subsequent MACs to `path` until the guard is dropped.
    pub fn scope(&self, path: impl Into<String>) -> ScopeGuard<'_, T> {
        self.macs.borrow_mut().scopes.push(path.into());
        ScopeGuard { tape: self }
    }

    pub fn macs_total(&self) -> u64 {
        self.macs.borrow().total
    }

    /// MACs per scope path in first-seen order; unscoped work is keyed by "".
    pub fn macs_by_scope(&self) -> IndexMap<String, u64> {
        self.macs.borrow().by_scope.clone()
    }

    fn count_macs(&self, n: u64) {
        let mut m = self.macs.borrow_mut();
        let key = m.scopes.last().cloned().unwrap_or_default();
        *m.by_scope.entry(key).or_insert(0) += n;
        m.total += n;
    }

    // ---- node plumbing ----------------------------------------------------

    fn push_node(&self, value: Value<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var(nodes.len() - 1)
    }

    fn data(&self, v: Var) -> Arc<Tensor<T>> {
        match &self.nodes.borrow()[v.0].value {
            Value::Data(t) => Arc::clone(t),
            Value::Meta(_) => unreachable!("data requested in shape-only mode"),
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        self.mode == Mode::Grad && vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Appends the result of an op. `compute` runs only when values are live.
    fn emit(&self, name: &str, inputs: &[Var], out_shape: Vec<usize>, compute: impl FnOnce() -> (Vec<T>, Op<T>)) -> Result<Var> {
        if self.mode == Mode::ShapeOnly {
            return Ok(self.push_node(Value::Meta(out_shape), false, Op::Untracked));
        }
        let (data, op) = compute();
        let t = Tensor::from_parts(out_shape, data);
        if !t.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let rg = self.any_grad(inputs);
        let op = if rg { op } else { Op::Untracked };
        Ok(self.push_node(Value::Data(Arc::new(t)), rg, op))
    }

    // ---- element-wise -----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        same_shape(&shape, &self.shape(b), "add")?;
        self.emit("add", &[a, b], shape, || {
            let (x, y) = (self.data(a), self.data(b));
            (x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect(), Op::Add(a, b))
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        same_shape(&shape, &self.shape(b), "sub")?;
        self.emit("sub", &[a, b], shape, || {
            let (x, y) = (self.data(a), self.data(b));
            (x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect(), Op::Sub(a, b))
        })
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        same_shape(&shape, &self.shape(b), "mul")?;
        self.emit("mul", &[a, b], shape, || {
            let (x, y) = (self.data(a), self.data(b));
            (x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect(), Op::Mul(a, b))
        })
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.emit("mul_scalar", &[a], self.shape(a), || (self.data(a).data().iter().map(|&v| v * c).collect(), Op::MulScalar(a, c)))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.emit("relu", &[a], self.shape(a), || {
            let x = self.data(a);
            let mut sig = self.relu_signature.get();
            let out = x
                .data()
                .iter()
                .map(|&v| {
                    let pos = v > T::zero();
                    sig = (sig ^ u64::from(pos)).wrapping_mul(0x0100_0000_01b3);
                    if pos {
                        v
                    } else {
                        T::zero()
                    }
                })
                .collect();
            self.relu_signature.set(sig);
            (out, Op::Relu(a))
        })
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.emit("gelu", &[a], self.shape(a), || (self.data(a).data().iter().map(|&v| kernels::gelu(v)).collect(), Op::Gelu(a)))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.emit("sigmoid", &[a], self.shape(a), || (self.data(a).data().iter().map(|&v| kernels::sigmoid(v)).collect(), Op::Sigmoid(a)))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout(&self, a: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 || self.mode == Mode::ShapeOnly {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = numel_of(&self.shape(a));
        let mask: Vec<T> = (0..n).map(|_| if rng.uniform() < rate { T::zero() } else { keep }).collect();
        self.emit("dropout", &[a], self.shape(a), || {
            let out = self.data(a).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (out, Op::Dropout { x: a, mask })
        })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m,p] x [p,q] -> [m,q]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ([m, p], [p2, q]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(dim_err!("matmul expects rank-2 operands, got {sa:?} and {sb:?}"));
        };
        let (m, p, q) = (*m, *p, *q);
        if p != *p2 {
            return Err(dim_err!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        self.count_macs((m * p * q) as u64);
        self.emit("matmul", &[a, b], vec![m, q], || (kernels::matmul(self.data(a).data(), self.data(b).data(), m, p, q), Op::Matmul(a, b)))
    }

    /// `x[..., in] * w[out, in]^T + b[out]`
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let [out_f, in_f] = sw.as_slice() else {
            return Err(dim_err!("linear weight must be rank 2, got {sw:?}"));
        };
        let (out_f, in_f) = (*out_f, *in_f);
        if sx.last() != Some(&in_f) {
            return Err(dim_err!("linear expects last dim {in_f}, input is {sx:?}"));
        }
        if let Some(b) = b {
            same_shape(&self.shape(b), &[out_f], "linear bias")?;
        }
        let rows = numel_of(&sx) / in_f;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = out_f;
        self.count_macs((rows * in_f * out_f) as u64);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.emit("linear", &inputs, out_shape, || {
            let mut y = kernels::matmul_nt(self.data(x).data(), self.data(w).data(), rows, in_f, out_f);
            if let Some(b) = b {
                let bias = self.data(b);
                for row in y.chunks_mut(out_f) {
                    add_into(row, bias.data());
                }
            }
            (y, Op::Linear { x, w, b })
        })
    }

    /// Grouped 2-D cross-correlation over NCHW input.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let ([n, cin, h, wd], [cout, cin_g, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(dim_err!("conv2d expects NCHW input and OIHW weight, got {sx:?}, {sw:?}"));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(dim_err!("conv2d: groups {groups} must divide Cin {cin} and Cout {cout}"));
        }
        if *cin_g != cin / groups {
            return Err(dim_err!("conv2d: weight expects {cin_g} channels per group, input has {}", cin / groups));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: stride must be positive"));
        }
        if h + 2 * padding < *kh || wd + 2 * padding < *kw {
            return Err(dim_err!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        if let Some(b) = b {
            same_shape(&self.shape(b), &[*cout], "conv2d bias")?;
        }
        let geom = ConvGeom {
            batch: *n,
            c_in: *cin,
            h: *h,
            w: *wd,
            c_out: *cout,
            kh: *kh,
            kw: *kw,
            stride,
            padding,
            groups,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        self.count_macs(geom.macs());
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.emit("conv2d", &inputs, vec![geom.batch, geom.c_out, geom.oh, geom.ow], || {
            let bias = b.map(|b| self.data(b));
            let y = kernels::conv2d(self.data(x).data(), self.data(w).data(), bias.as_ref().map(|t| t.data()), &geom);
            (y, Op::Conv2d { x, w, b, geom })
        })
    }

    // ---- pooling and channel ops -----------------------------------------

    pub fn avg_pool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x);
        let [n, c, h, w] = sx.as_slice() else {
            return Err(dim_err!("avg_pool2d expects NCHW input, got {sx:?}"));
        };
        if k == 0 || stride == 0 || *h < k || *w < k {
            return Err(dim_err!("avg_pool2d: window {k} stride {stride} invalid for {h}x{w}"));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        self.emit("avg_pool2d", &[x], vec![*n, *c, oh, ow], || {
            let (y, _, _) = kernels::avg_pool2d(self.data(x).data(), n * c, (*h, *w), k, stride);
            (y, Op::AvgPool { x, k, stride })
        })
    }

    /// `[N,C,H,W] -> [N,C]`
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let [n, c, h, w] = sx.as_slice() else {
            return Err(dim_err!("global_avg_pool expects NCHW input, got {sx:?}"));
        };
        let hw = h * w;
        self.emit("global_avg_pool", &[x], vec![*n, *c], || {
            let inv = T::from_f64_lossy(1.0 / hw as f64);
            let y = self.data(x).data().chunks(hw).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
            (y, Op::GlobalAvgPool(x))
        })
    }

    /// Multiplies each `[H,W]` plane of `x[N,C,H,W]` by `s[N,C]`.
    pub fn scale_channels(&self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 4 || ss.as_slice() != &sx[..2] {
            return Err(dim_err!("scale_channels: {ss:?} does not scale {sx:?}"));
        }
        let hw = sx[2] * sx[3];
        self.emit("scale_channels", &[x, s], sx, || {
            let (xv, sv) = (self.data(x), self.data(s));
            let y = xv.data().chunks(hw).zip(sv.data()).flat_map(|(p, &g)| p.iter().map(move |&v| v * g)).collect();
            (y, Op::ScaleChannels { x, s })
        })
    }

    // ---- normalization ----------------------------------------------------

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(dim_err!("softmax axis {axis} invalid for rank {}", sx.len()));
        }
        let split = kernels::split_axis(&sx, axis);
        self.emit("softmax", &[x], sx, || (kernels::softmax(self.data(x).data(), split), Op::Softmax { x, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let Some(&c) = sx.last() else {
            return Err(dim_err!("layer_norm on a scalar"));
        };
        same_shape(&self.shape(gain), &[c], "layer_norm gain")?;
        same_shape(&self.shape(bias), &[c], "layer_norm bias")?;
        self.emit("layer_norm", &[x, gain, bias], sx, || {
            let (y, cache) = kernels::layer_norm(self.data(x).data(), self.data(gain).data(), self.data(bias).data(), c, eps);
            (y, Op::LayerNorm { x, g: gain, b: bias, cache })
        })
    }

    /// Batch norm with frozen running statistics over axis 1 of NCHW input.
    pub fn batch_norm_inference(&self, x: Var, gamma: Var, beta: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(dim_err!("batch_norm expects at least [N, C], got {sx:?}"));
        }
        let c = sx[1];
        for (v, name) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
            same_shape(&self.shape(v), &[c], &format!("batch_norm {name}"))?;
        }
        let plane: usize = sx[2..].iter().product();
        self.emit("batch_norm", &[x, gamma, beta], sx, || {
            let (xv, g, bt, mu, var) = (self.data(x), self.data(gamma), self.data(beta), self.data(mean), self.data(var));
            let eps = T::from_f64_lossy(eps);
            let rstd: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut y = Vec::with_capacity(xv.numel());
            let mut xhat = Vec::with_capacity(xv.numel());
            for (i, p) in xv.data().chunks(plane).enumerate() {
                let ch = i % c;
                for &v in p {
                    let xh = (v - mu.data()[ch]) * rstd[ch];
                    xhat.push(xh);
                    y.push(xh * g.data()[ch] + bt.data()[ch]);
                }
            }
            (y, Op::BatchNorm { x, gamma, beta, xhat, rstd })
        })
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        check_rank(shape)?;
        let sx = self.shape(x);
        if numel_of(&sx) != numel_of(shape) {
            return Err(dim_err!("cannot reshape {sx:?} into {shape:?}"));
        }
        self.emit("reshape", &[x], shape.to_vec(), || (self.data(x).data().to_vec(), Op::Reshape(x)))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("{perm:?} is not a permutation of rank {}", sx.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        self.emit("permute", &[x], out_shape, || {
            let (y, _) = kernels::permute(self.data(x).data(), &sx, perm);
            (y, Op::Permute { x, perm: perm.to_vec() })
        })
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(dim_err!("transpose expects a matrix, got {:?}", self.shape(x)));
        }
        self.permute(x, &[1, 0])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {sx:?}"));
        }
        let (outer, full, inner) = kernels::split_axis(&sx, axis);
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        self.emit("narrow", &[x], out_shape, || {
            let xv = self.data(x);
            let mut y = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                y.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            (y, Op::Narrow { x, axis, start })
        })
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(dim_err!("concat of zero tensors"));
        };
        let s0 = self.shape(first);
        if axis >= s0.len() {
            return Err(dim_err!("concat axis {axis} invalid for rank {}", s0.len()));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(dim_err!("concat: {s:?} incompatible with {s0:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        self.emit("concat", xs, out_shape, || {
            let (outer, _, inner) = kernels::split_axis(&s0, axis);
            let parts: Vec<Arc<Tensor<T>>> = xs.iter().map(|&v| self.data(v)).collect();
            let mut y = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in &parts {
                    let chunk = p.shape()[axis] * inner;
                    y.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            (y, Op::Concat { xs: xs.to_vec(), axis })
        })
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.emit("sum", &[x], Vec::new(), || (vec![self.data(x).sum()], Op::Sum(x)))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = numel_of(&self.shape(x));
        self.emit("mean", &[x], Vec::new(), || (vec![self.data(x).sum() / T::from_usize(n).unwrap()], Op::Mean(x)))
    }

    /// Mean cross-entropy of `logits[B,K]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        let [b, k] = sl.as_slice() else {
            return Err(dim_err!("cross_entropy expects [B, K] logits, got {sl:?}"));
        };
        if labels.len() != *b || labels.iter().any(|&l| l >= *k) {
            return Err(dim_err!("cross_entropy: {} labels for batch {b} with {k} classes", labels.len()));
        }
        let (b, k) = (*b, *k);
        self.emit("cross_entropy", &[logits], Vec::new(), || {
            let probs = kernels::softmax(self.data(logits).data(), (b, k, 1));
            let mut loss = T::zero();
            for (i, &l) in labels.iter().enumerate() {
                loss = loss - probs[i * k + l].max(T::min_positive_value()).ln();
            }
            let loss = loss / T::from_usize(b).unwrap();
            (vec![loss], Op::CrossEntropy { logits, probs, labels: labels.to_vec() })
        })
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Back-propagates from a scalar `loss` and consumes the graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.mode != Mode::Grad {
            return Err(Error::State(format!("backward on a {:?} tape", self.mode)));
        }
        if self.consumed.replace(true) {
            return Err(Error::State("graph already consumed by a previous backward".into()));
        }
        let shape = self.shape(loss);
        if numel_of(&shape) != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(&shape));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            let out = match &node.value {
                Value::Data(t) => Arc::clone(t),
                Value::Meta(_) => unreachable!(),
            };
            let mut send = |v: Var, g: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    slot @ None => *slot = Some(Tensor::from_parts(nodes[v.0].value.shape().to_vec(), g)),
                }
            };
            let val = |v: Var| match &nodes[v.0].value {
                Value::Data(t) => Arc::clone(t),
                Value::Meta(_) => unreachable!(),
            };
            let g = gout.data();
            match &node.op {
                Op::Leaf | Op::Untracked => {}
                Op::Add(a, b) => {
                    send(*a, g.to_vec());
                    send(*b, g.to_vec());
                }
                Op::Sub(a, b) => {
                    send(*a, g.to_vec());
                    send(*b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    send(*a, g.iter().zip(bv.data()).map(|(&d, &y)| d * y).collect());
                    send(*b, g.iter().zip(av.data()).map(|(&d, &x)| d * x).collect());
                }
                Op::MulScalar(a, c) => send(*a, g.iter().map(|&v| v * *c).collect()),
                Op::Matmul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, p, q) = (av.dim(0), av.dim(1), bv.dim(1));
                    send(*a, kernels::matmul_nt(g, bv.data(), m, q, p));
                    send(*b, kernels::matmul_tn(av.data(), g, m, p, q));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (out_f, in_f) = (wv.dim(0), wv.dim(1));
                    let rows = xv.numel() / in_f;
                    send(*x, kernels::matmul(g, wv.data(), rows, out_f, in_f));
                    send(*w, kernels::matmul_tn(g, xv.data(), rows, out_f, in_f));
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); out_f];
                        for row in g.chunks(out_f) {
                            add_into(&mut db, row);
                        }
                        send(*b, db);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(val(*x).data(), val(*w).data(), g, geom);
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::AvgPool { x, k, stride } => {
                    let s = val(*x).shape().to_vec();
                    send(*x, kernels::avg_pool2d_backward(g, s[0] * s[1], (s[2], s[3]), *k, *stride));
                }
                Op::GlobalAvgPool(x) => {
                    let s = val(*x).shape().to_vec();
                    let hw = s[2] * s[3];
                    let inv = T::from_f64_lossy(1.0 / hw as f64);
                    send(*x, g.iter().flat_map(|&d| std::iter::repeat(d * inv).take(hw)).collect());
                }
                Op::ScaleChannels { x, s } => {
                    let (xv, sv) = (val(*x), val(*s));
                    let hw = xv.dim(2) * xv.dim(3);
                    let dx = g.chunks(hw).zip(sv.data()).flat_map(|(p, &c)| p.iter().map(move |&d| d * c)).collect();
                    let ds = g
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).fold(T::zero(), |a, (&d, &v)| a + d * v))
                        .collect();
                    send(*x, dx);
                    send(*s, ds);
                }
                Op::Softmax { x, axis } => {
                    let split = kernels::split_axis(out.shape(), *axis);
                    send(*x, kernels::softmax_backward(out.data(), g, split));
                }
                Op::LayerNorm { x, g: gain, b, cache } => {
                    let gv = val(*gain);
                    let c = gv.numel();
                    let (dx, dg, db) = kernels::layer_norm_backward(g, gv.data(), cache, c);
                    send(*x, dx);
                    send(*gain, dg);
                    send(*b, db);
                }
                Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
                    let gv = val(*gamma);
                    let c = gv.numel();
                    let plane = g.len() / (out.dim(0) * c);
                    let mut dx = Vec::with_capacity(g.len());
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (i, (gp, xp)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        let ch = i % c;
                        for (&d, &xh) in gp.iter().zip(xp) {
                            dx.push(d * gv.data()[ch] * rstd[ch]);
                            dg[ch] = dg[ch] + d * xh;
                            db[ch] = db[ch] + d;
                        }
                    }
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    send(*x, g.iter().zip(xv.data()).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect());
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    send(*x, g.iter().zip(xv.data()).map(|(&d, &v)| d * kernels::gelu_grad(v)).collect());
                }
                Op::Sigmoid(x) => {
                    send(*x, g.iter().zip(out.data()).map(|(&d, &y)| d * y * (T::one() - y)).collect());
                }
                Op::Dropout { x, mask } => {
                    send(*x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
                }
                Op::Reshape(x) => send(*x, g.to_vec()),
                Op::Permute { x, perm } => {
                    let inv = kernels::inverse_permutation(perm);
                    send(*x, kernels::permute(g, out.shape(), &inv).0);
                }
                Op::Narrow { x, axis, start } => {
                    let s = val(*x).shape().to_vec();
                    let (outer, full, inner) = kernels::split_axis(&s, *axis);
                    let len = out.dim(*axis);
                    let mut dx = vec![T::zero(); numel_of(&s)];
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(*x, dx);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for &v in xs {
                        let len = nodes[v.0].value.shape()[*axis];
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        send(v, dv);
                    }
                }
                Op::Sum(x) => {
                    let n = val(*x).numel();
                    send(*x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    send(*x, vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / T::from_usize(b).unwrap();
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * k + l] = d[i * k + l] - scale;
                    }
                    send(*logits, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::<f64>::inference();
        let i2 = tape.leaf(Tensor::eye(2), false);
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]), false);
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1., 2., 3., 4.]);

        let p = tape.leaf(t(&[2, 2], &[1., 0., 0., 0.]), false);
        let b = tape.leaf(t(&[2, 2], &[5., 6., 7., 8.]), false);
        let y = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[5., 6., 0., 0.]);
        assert_eq!(tape.macs_total(), 16);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_of_linear_map() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]), true);
        let y = tape.mul_scalar(x, 2.0).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_of_square() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_and_runs_once() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul_scalar(x, 3.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.value(tape.softmax(x, 0).unwrap()).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap(), false);
        let y = tape.value(tape.softmax(x, 0).unwrap()).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), false);
        let y = tape.value(tape.softmax(x, 0).unwrap()).unwrap();
        for col in 0..3 {
            assert!((y.at(&[0, col]) + y.at(&[1, col]) - 1.0).abs() < 1e-15);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::inference();
        let g = tape.leaf(Tensor::ones(&[4]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let x = tape.leaf(Tensor::full(&[4], 3.5), false);
        let y = tape.value(tape.layer_norm(x, g, b, 1e-5).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g = tape.leaf(Tensor::ones(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let x = tape.leaf(t(&[2], &[1., -1.]), false);
        let y = tape.value(tape.layer_norm(x, g, b, 1e-12).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let bad = tape.leaf(Tensor::zeros(&[3]), false);
        assert!(matches!(tape.layer_norm(x, bad, b, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_and_tap_counting() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(t(&[1, 3, 2, 2], &(0..12).map(f64::from).collect::<Vec<_>>()), false);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let w = tape.leaf(w, false);
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), tape.value(x).unwrap().data());

        let x = tape.leaf(Tensor::ones(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::ones(&[2, 1, 3, 3]), false);
        let y = tape.value(tape.conv2d(x, w, None, 1, 1, 2).unwrap()).unwrap();
        assert_eq!(y.at(&[0, 1, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 1, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 1, 3, 3]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_rejects_bad_groups_and_sizes() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[4, 1, 3, 3]), false);
        assert!(tape.conv2d(x, w, None, 1, 1, 2).is_err());
        let w = tape.leaf(Tensor::zeros(&[3, 3, 7, 7]), false);
        assert!(tape.conv2d(x, w, None, 1, 0, 1).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]), false);
        assert_eq!(tape.value(tape.relu(x).unwrap()).unwrap().data(), &[0., 0., 2.]);

        let mut rng = RngStream::new(0, 2);
        let y = tape.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), tape.value(x).unwrap().data());
        let y = tape.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), tape.value(x).unwrap().data());
        assert!(matches!(tape.dropout(x, 1.0, &mut rng, true), Err(Error::Parameter(_))));

        let m = tape.leaf(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 1., 2., 3., 4.]), false);
        let p = tape.value(tape.global_avg_pool(m).unwrap()).unwrap();
        assert_eq!(p.shape(), &[1, 2]);
        assert_eq!(p.data(), &[2.5, 2.5]);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::ones(&[1000]), false);
        let mut rng = RngStream::new(3, 2);
        let y = tape.value(tape.dropout(x, 0.25, &mut rng, true).unwrap()).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn shape_only_counts_without_computing() {
        let tape = Tape::<f32>::shape_only();
        let a = tape.placeholder(&[10, 4], false).unwrap();
        let w = tape.placeholder(&[8, 4], false).unwrap();
        let _g = tape.scope("fc");
        let y = tape.linear(a, w, None).unwrap();
        assert_eq!(tape.shape(y), vec![10, 8]);
        assert_eq!(tape.macs_total(), 320);
        assert_eq!(tape.macs_by_scope()["fc"], 320);
        assert!(tape.value(y).is_err());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]), true);
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 3).unwrap();
        assert_eq!(tape.value(a).unwrap().data(), &[1., 5.]);
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), tape.value(x).unwrap().data());
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::full(&[2], 3.0e38), false);
        assert!(matches!(tape.mul_scalar(x, 10.0), Err(Error::Numeric(_))));
    }
}
