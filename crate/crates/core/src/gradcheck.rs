//! Finite-difference gradient checking.

use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::backbone::{build_variant, HpbParams, StageConfig, VariantConfig};
use crate::error::{Error, Result};
use crate::local::{LimParams, SE_REDUCTION};
use crate::params::{Builder, Ctx, ParamId, ParamStore};
use crate::rng::{RngStream, DATA_STREAM};
use crate::ssa::{strip_attention, SsaConfig, SsaParams};
use crate::tensor::Tensor;

/// Stream for off-init parameter draws.
pub const PERTURB_STREAM: u64 = 4;
/// Stream for the loss weights.
pub const WEIGHT_STREAM: u64 = 5;
pub const INPUT_GROUP: &str = "input";

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Parameter(format!("step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape(), grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates checked per group; larger groups are subsampled evenly.
    pub max_coords: usize,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Standard deviation of the random parameter values.
    pub param_std: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, max_coords: 32, floor: 1e-3, param_std: 0.2 }
    }
}

impl GradcheckOptions {
    /// Defaults with a tighter coordinate budget for the full backbone, which
    /// has over 160 parameter tensors.
    pub fn for_module(module: GradModule) -> Self {
        match module {
            GradModule::Backbone => Self { max_coords: 4, ..Self::default() },
            _ => Self::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    /// Coordinates whose probes crossed a ReLU kink.
    pub skipped: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub module: String,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |g| g.rel_error)
    }

    /// Strict: every group must be below `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.rel_error < tol)
    }
}

fn even_coords(numel: usize, cap: usize) -> Vec<usize> {
    if numel <= cap {
        (0..numel).collect()
    } else {
        (0..cap).map(|j| j * numel / cap).collect()
    }
}

/// Compares `backward` of `sum(forward(x) * R)` against central differences,
/// for the input and every trainable parameter, with fixed random weights `R`.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    forward: F,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<Vec<GroupReport>>
where
    F: Fn(&Ctx<'_, f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let x = tape.leaf(input.clone(), true);
    let out = forward(&ctx, x)?;
    let mut rng = RngStream::new(seed, WEIGHT_STREAM);
    let shape = tape.shape(out);
    let weights = Tensor::new(&shape, (0..shape.iter().product()).map(|_| rng.normal()).collect())?;
    let loss = {
        let w = tape.leaf(weights.clone(), false);
        tape.sum(tape.mul(out, w)?)?
    };
    let grads = tape.backward(loss)?;
    let bound: std::collections::HashMap<ParamId, Var> = ctx.bound_params().into_iter().collect();

    let eval = |s: &ParamStore<f64>, xin: &Tensor<f64>| -> Result<(f64, u64)> {
        let t = Tape::inference();
        let c = Ctx::new(&t, s);
        let xv = t.leaf(xin.clone(), false);
        let o = forward(&c, xv)?;
        let w = t.leaf(weights.clone(), false);
        let l = t.sum(t.mul(o, w)?)?;
        Ok((t.value(l)?.item()?, t.relu_signature()))
    };

    let analytic_of = |v: Option<&Var>, shape: &[usize]| -> Tensor<f64> {
        v.and_then(|v| grads.get(*v)).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    };

    let mut reports = Vec::new();
    let mut x_probe = input.clone();
    let analytic = analytic_of(Some(&x), input.shape());
    reports.push(compare(INPUT_GROUP, &analytic, input.numel(), opts, |i, delta| {
        let orig = x_probe.data()[i];
        x_probe.data_mut()[i] = orig + delta;
        let r = eval(store, &x_probe);
        x_probe.data_mut()[i] = orig;
        r
    })?);

    let mut work = store.clone();
    for (id, name, entry) in store.iter() {
        if !entry.trainable {
            continue;
        }
        let analytic = analytic_of(bound.get(&id), entry.tensor.shape());
        let report = compare(name, &analytic, entry.tensor.numel(), opts, |i, delta| {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + delta;
            let r = eval(&work, input);
            work.get_mut(id).data_mut()[i] = orig;
            r
        })?;
        reports.push(report);
    }
    Ok(reports)
}

fn compare<P>(name: &str, analytic: &Tensor<f64>, numel: usize, opts: &GradcheckOptions, mut probe: P) -> Result<GroupReport>
where
    P: FnMut(usize, f64) -> Result<(f64, u64)>,
{
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    for i in even_coords(numel, opts.max_coords) {
        let (plus, sig_plus) = probe(i, opts.step)?;
        let (minus, sig_minus) = probe(i, -opts.step)?;
        if sig_plus != sig_minus {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.data()[i];
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        checked += 1;
    }
    let (an, nn) = (a2.sqrt(), n2.sqrt());
    Ok(GroupReport {
        name: name.to_string(),
        numel,
        checked,
        skipped,
        analytic_norm: an,
        numeric_norm: nn,
        rel_error: diff2.sqrt() / an.max(nn).max(opts.floor),
    })
}

/// Which block a built-in gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradModule {
    Ssa,
    Lim,
    Hpb,
    Backbone,
}

impl GradModule {
    pub const ALL: [GradModule; 4] = [Self::Ssa, Self::Lim, Self::Hpb, Self::Backbone];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ssa => "ssa",
            Self::Lim => "lim",
            Self::Hpb => "hpb",
            Self::Backbone => "backbone",
        }
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown module {s:?}; expected ssa, lim, hpb or backbone")))
    }
}

fn random_input(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    let mut rng = RngStream::new(seed, DATA_STREAM);
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.normal()).collect())
}

fn tiny_stage() -> StageConfig {
    StageConfig { channels: 8, blocks: 1, sr_ratio: 2, heads: 2, mlp_ratio: 4 }
}

/// Runs the fixed tiny-shape check for `module`.
///
/// Shapes: SSA on 16 tokens (4x4) of width 8 with 2 heads and k = 2; LIM and
/// HPB on a 1x8x4x4 map; the backbone is the 1-block-per-stage toy at 32x32,
/// the smallest input every stage accepts.
pub fn gradcheck_module(module: GradModule, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut store = ParamStore::<f64>::new();
    let stage = tiny_stage();
    let groups = match module {
        GradModule::Ssa => {
            let p = SsaParams::build(&mut Builder::new(&mut store, seed), "ssa", &SsaConfig::new(8, 2, 2))?;
            store.randomize(&mut RngStream::new(seed, PERTURB_STREAM), opts.param_std);
            let x = random_input(&[16, 8], seed)?;
            check_gradients(&store, &x, |ctx, x| Ok(strip_attention(ctx, x, (4, 4), &p)?.out), seed, opts)?
        }
        GradModule::Lim => {
            let p = LimParams::build(&mut Builder::new(&mut store, seed), "lim", 8, SE_REDUCTION)?;
            store.randomize(&mut RngStream::new(seed, PERTURB_STREAM), opts.param_std);
            let x = random_input(&[1, 8, 4, 4], seed)?;
            check_gradients(&store, &x, |ctx, x| p.forward(ctx, x), seed, opts)?
        }
        GradModule::Hpb => {
            let mut cfg = VariantConfig::toy([1, 1, 1, 1], 2);
            cfg.stages[0] = stage;
            let p = HpbParams::build(&mut Builder::new(&mut store, seed), "hpb", &stage, &cfg)?;
            store.randomize(&mut RngStream::new(seed, PERTURB_STREAM), opts.param_std);
            let x = random_input(&[1, 8, 4, 4], seed)?;
            check_gradients(&store, &x, |ctx, x| p.forward(ctx, x), seed, opts)?
        }
        GradModule::Backbone => {
            let mut model = build_variant::<f64>(&VariantConfig::toy([1, 1, 1, 1], 3), seed)?;
            model.store.randomize(&mut RngStream::new(seed, PERTURB_STREAM), opts.param_std);
            let x = random_input(&[1, 3, 32, 32], seed)?;
            let arch = &model.arch;
            check_gradients(&model.store, &x, |ctx, x| Ok(arch.forward(ctx, x)?.logits), seed, opts)?
        }
    };
    Ok(GradcheckReport { module: module.as_str().to_string(), seed, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn half_square_norm_gradient_is_identity() {
        let x = Tensor::new(&[2], vec![3.0, -1.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8 && (g.data()[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn module_names_round_trip() {
        for m in GradModule::ALL {
            assert_eq!(m.as_str().parse::<GradModule>().unwrap(), m);
        }
        assert!("mlp".parse::<GradModule>().is_err());
    }
}
