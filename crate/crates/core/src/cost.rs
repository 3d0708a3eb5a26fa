//! Parameter and MAC accounting, closed-form attention costs and the
//! identities that tie the two together.
//!
//! MAC convention: one MAC per scalar multiply-accumulate in conv, linear and
//! matmul; bias adds, softmax, norms, activations and pooling are free.
//! Attention matmuls are counted per head at their true widths.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::backbone::{Model, StageShape, VariantConfig};
use crate::error::{Error, Result};
use crate::params::{Builder, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::ssa::{reference_mhsa, strip_attention, MhsaParams, SrMode, SsaConfig, SsaParams};

pub const MAC_CONVENTION: &str = "macs-v1";

/// MACs of one shape-only forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacCount {
    pub total: u64,
    pub by_scope: IndexMap<String, u64>,
}

/// Runs `forward` on a shape-only tape; no arithmetic is performed.
pub fn count_macs_with<T, F>(store: &ParamStore<T>, input_shape: &[usize], forward: F) -> Result<MacCount>
where
    T: Scalar,
    F: FnOnce(&Ctx<'_, T>, Var) -> Result<Var>,
{
    let tape = Tape::shape_only();
    let ctx = Ctx::new(&tape, store);
    let x = tape.placeholder(input_shape, false)?;
    forward(&ctx, x)?;
    Ok(MacCount { total: tape.macs_total(), by_scope: tape.macs_by_scope() })
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> u64 {
    model.param_count()
}

/// MACs of a batch-1 forward at `height x width`.
pub fn count_macs<T: Scalar>(model: &Model<T>, (height, width): (usize, usize)) -> Result<MacCount> {
    count_macs_with(&model.store, &[1, 3, height, width], |ctx, x| Ok(model.forward(ctx, x)?.logits))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub layers: Vec<LayerCost>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub resolution: [usize; 2],
    pub convention: String,
    pub stages: Vec<StageCost>,
    pub params: u64,
    pub macs: u64,
}

fn parent_path(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(p, _)| p)
}

fn top_level(path: &str) -> &str {
    path.split('.').next().unwrap_or(path)
}

impl CostReport {
    pub fn build<T: Scalar>(model: &Model<T>, resolution: (usize, usize)) -> Result<Self> {
        let macs = count_macs(model, resolution)?;
        let mut layers: IndexMap<String, LayerCost> = IndexMap::new();
        fn layer<'m>(layers: &'m mut IndexMap<String, LayerCost>, path: &str) -> &'m mut LayerCost {
            layers.entry(path.to_string()).or_insert_with(|| LayerCost { path: path.to_string(), params: 0, macs: 0 })
        }
        for (_, name, entry) in model.store.iter() {
            if entry.trainable {
                layer(&mut layers, parent_path(name)).params += entry.tensor.numel() as u64;
            }
        }
        for (scope, &n) in &macs.by_scope {
            layer(&mut layers, scope).macs += n;
        }
        let mut stages: IndexMap<String, StageCost> = IndexMap::new();
        for (path, cost) in layers {
            let name = top_level(&path).to_string();
            let stage = stages.entry(name.clone()).or_insert_with(|| StageCost { name, params: 0, macs: 0, layers: Vec::new() });
            stage.params += cost.params;
            stage.macs += cost.macs;
            stage.layers.push(cost);
        }
        let stages: Vec<StageCost> = stages.into_values().collect();
        let report = Self {
            variant: model.config().name.clone(),
            resolution: [resolution.0, resolution.1],
            convention: MAC_CONVENTION.to_string(),
            params: stages.iter().map(|s| s.params).sum(),
            macs: stages.iter().map(|s| s.macs).sum(),
            stages,
        };
        if report.params != model.param_count() || report.macs != macs.total {
            return Err(Error::Contract("cost report subtotals disagree with totals".into()));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table with one row per layer and stage subtotals.
    pub fn to_table(&self) -> String {
        let width = self.stages.iter().flat_map(|s| s.layers.iter().map(|l| l.path.len() + 2)).max().unwrap_or(0).max(12);
        let mut out = String::new();
        let row = |out: &mut String, path: &str, params: u64, macs: u64| {
            let _ = writeln!(out, "{path:<width$} {params:>12} {macs:>15}");
        };
        let _ = writeln!(out, "{} @ {}x{} ({})", self.variant, self.resolution[0], self.resolution[1], self.convention);
        let _ = writeln!(out, "{:<width$} {:>12} {:>15}", "layer", "params", "macs");
        for s in &self.stages {
            for l in &s.layers {
                row(&mut out, &format!("  {}", l.path), l.params, l.macs);
            }
            row(&mut out, &s.name, s.params, s.macs);
        }
        row(&mut out, "total", self.params, self.macs);
        out
    }
}

/// Shape of one attention layer as exact integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FormulaInputs {
    pub n: u64,
    pub ns: u64,
    pub d: u64,
    pub h: u64,
    pub k: u64,
}

impl FormulaInputs {
    pub fn new(n: u64, d: u64, h: u64, k: u64) -> Result<Self> {
        if n == 0 || d == 0 || h == 0 || k == 0 {
            return Err(Error::Parameter(format!("N, d, h, k must be positive: {n}, {d}, {h}, {k}")));
        }
        let k2 = k.checked_mul(k).ok_or_else(|| Error::Range(format!("k = {k} squared overflows")))?;
        if n % k2 != 0 {
            return Err(Error::Contract(format!("N = {n} is not divisible by k^2 = {k2}")));
        }
        Ok(Self { n, ns: n / k2, d, h, k })
    }

    pub fn from_stage(s: &StageShape) -> Result<Self> {
        Self::new(s.tokens() as u64, s.channels as u64, s.heads as u64, s.sr_ratio as u64)
    }
}

fn overflow(what: &str) -> Error {
    Error::Range(format!("{what} overflows 64 bits"))
}

fn mul(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b).ok_or_else(|| overflow("MAC count"))
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or_else(|| overflow("MAC count"))
}

/// `3 N d^2 + 2 N^2 d`
pub fn mhsa_macs_formula(n: u64, d: u64) -> Result<u64> {
    if n == 0 || d == 0 {
        return Err(Error::Parameter(format!("N and d must be positive: {n}, {d}")));
    }
    add(mul(3, mul(n, mul(d, d)?)?)?, mul(2, mul(mul(n, n)?, d)?)?)
}

/// `numerator / k^2`, failing with the rational value if inexact.
fn exact_div(numerator: u64, k2: u64, term: &str) -> Result<u64> {
    if numerator % k2 != 0 {
        return Err(Error::Contract(format!("{term} = {numerator}/{k2} is not an integer")));
    }
    Ok(numerator / k2)
}

/// `N d^2 / k^2 + (1 + d) N^2 / k^2 + N d h + N d h / k^2`
pub fn ssa_macs_formula(f: &FormulaInputs) -> Result<u64> {
    let k2 = mul(f.k, f.k)?;
    let ndh = mul(mul(f.n, f.d)?, f.h)?;
    let v = exact_div(mul(f.n, mul(f.d, f.d)?)?, k2, "N d^2 / k^2")?;
    let attn = exact_div(mul(add(1, f.d)?, mul(f.n, f.n)?)?, k2, "(1 + d) N^2 / k^2")?;
    let key = exact_div(ndh, k2, "N d h / k^2")?;
    add(add(add(v, attn)?, ndh)?, key)
}

/// `(1 + 2/k^2) N d^2 + (1 + d) N^2 / k^2`
pub fn bound_a(f: &FormulaInputs) -> Result<u64> {
    let k2 = mul(f.k, f.k)?;
    let nd2 = mul(f.n, mul(f.d, f.d)?)?;
    let scaled = exact_div(mul(2, nd2)?, k2, "2 N d^2 / k^2")?;
    let attn = exact_div(mul(add(1, f.d)?, mul(f.n, f.n)?)?, k2, "(1 + d) N^2 / k^2")?;
    add(add(nd2, scaled)?, attn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InequalityReport {
    pub inputs: FormulaInputs,
    pub ssa: u64,
    pub bound_a: u64,
    pub mhsa: u64,
    /// `ssa <= bound_a < mhsa`
    pub holds: bool,
    /// Only `k >= 2` is expected to make `bound_a < mhsa` strict.
    pub strict: bool,
}

pub fn verify_inequality(f: &FormulaInputs) -> Result<InequalityReport> {
    let ssa = ssa_macs_formula(f)?;
    let bound = bound_a(f)?;
    let mhsa = mhsa_macs_formula(f.n, f.d)?;
    Ok(InequalityReport { inputs: *f, ssa, bound_a: bound, mhsa, holds: ssa <= bound && bound < mhsa, strict: f.k >= 2 })
}

/// Counted SSA MACs split into the closed form plus named corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReconcileReport {
    pub inputs: FormulaInputs,
    pub counted: u64,
    pub formula: u64,
    /// `N d^2`
    pub output_projection: u64,
    /// `N Ns (h - 1)`: the closed form charges one query-key product per
    /// token pair instead of one per head.
    pub per_head_scores: u64,
    /// `N d` for the strided depthwise reduction; zero for pooling or `k = 1`.
    pub reduction_conv: u64,
    pub holds: bool,
}

impl ReconcileReport {
    pub fn expected(&self) -> u64 {
        self.formula + self.output_projection + self.per_head_scores + self.reduction_conv
    }

    pub fn check(&self) -> Result<()> {
        if self.holds {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "counted {} != formula {} + {} + {} + {} for {:?}",
                self.counted, self.formula, self.output_projection, self.per_head_scores, self.reduction_conv, self.inputs
            )))
        }
    }
}

/// Counted MACs of one strip attention layer on an `hw` map.
pub fn count_ssa_macs(hw: (usize, usize), dim: usize, heads: usize, sr_ratio: usize, mode: SrMode) -> Result<u64> {
    let mut store = ParamStore::<f32>::new();
    let cfg = SsaConfig { sr_mode: mode, ..SsaConfig::new(dim, heads, sr_ratio) };
    let p = SsaParams::build(&mut Builder::new(&mut store, 0), "ssa", &cfg)?;
    Ok(count_macs_with(&store, &[hw.0 * hw.1, dim], |ctx, x| Ok(strip_attention(ctx, x, hw, &p)?.out))?.total)
}

/// Counted MACs of the reference multi-head attention on `n` tokens.
pub fn count_mhsa_macs(n: usize, dim: usize, heads: usize) -> Result<u64> {
    let mut store = ParamStore::<f32>::new();
    let p = MhsaParams::build(&mut Builder::new(&mut store, 0), "mhsa", dim, heads)?;
    Ok(count_macs_with(&store, &[n, dim], |ctx, x| Ok(reference_mhsa(ctx, x, &p)?.out))?.total)
}

/// Reconciles against a layer on a `k x N/k` map.
pub fn reconcile_ssa(f: &FormulaInputs, mode: SrMode) -> Result<ReconcileReport> {
    reconcile_ssa_at(f, (f.k as usize, (f.n / f.k) as usize), mode)
}

pub fn reconcile_ssa_at(f: &FormulaInputs, hw: (usize, usize), mode: SrMode) -> Result<ReconcileReport> {
    if (hw.0 * hw.1) as u64 != f.n {
        return Err(Error::Parameter(format!("map {hw:?} does not hold N = {} tokens", f.n)));
    }
    let counted = count_ssa_macs(hw, f.d as usize, f.h as usize, f.k as usize, mode)?;
    reconcile_counted(f, mode, counted)
}

/// Compares an externally supplied `counted` value with the identity.
pub fn reconcile_counted(f: &FormulaInputs, mode: SrMode, counted: u64) -> Result<ReconcileReport> {
    let formula = ssa_macs_formula(f)?;
    let output_projection = mul(f.n, mul(f.d, f.d)?)?;
    let per_head_scores = mul(mul(f.n, f.ns)?, f.h - 1)?;
    let reduction_conv = if mode == SrMode::Conv && f.k > 1 { mul(f.n, f.d)? } else { 0 };
    let mut r = ReconcileReport { inputs: *f, counted, formula, output_projection, per_head_scores, reduction_conv, holds: false };
    r.holds = counted == r.expected();
    Ok(r)
}

/// Analytic parameter count of one local branch (module plus its pre-norm)
/// at width `c` with SE reduction `r`.
pub fn lim_branch_params_formula(c: u64, r: u64) -> u64 {
    let hidden = c / r;
    let pointwise = 2 * (c * c + c);
    let depthwise = 9 * c + c;
    let se = (c * hidden + hidden) + (hidden * c + c);
    let norm = 2 * c;
    pointwise + depthwise + se + norm
}

/// Parameters removed by disabling the local branch in every block.
pub fn lim_ablation_delta(cfg: &VariantConfig) -> u64 {
    cfg.stages.iter().map(|s| s.blocks as u64 * lim_branch_params_formula(s.channels as u64, cfg.se_ratio as u64)).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCheck {
    pub variant: String,
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub reconcile: ReconcileReport,
    pub inequality: InequalityReport,
}

impl StageCheck {
    pub fn passes(&self) -> bool {
        self.reconcile.holds && (self.inequality.holds || !self.inequality.strict)
    }
}

/// Reconciliation and inequality checks for every stage of `cfg`.
pub fn stage_checks(cfg: &VariantConfig, resolution: (usize, usize)) -> Result<Vec<StageCheck>> {
    cfg.validate()?;
    cfg.stage_shapes(resolution)?
        .into_iter()
        .map(|s| {
            let f = FormulaInputs::from_stage(&s)?;
            Ok(StageCheck {
                variant: cfg.name.clone(),
                stage: s.stage,
                height: s.height,
                width: s.width,
                reconcile: reconcile_ssa_at(&f, (s.height, s.width), cfg.sr_mode)?,
                inequality: verify_inequality(&f)?,
            })
        })
        .collect()
}
