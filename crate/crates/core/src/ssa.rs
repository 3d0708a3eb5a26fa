//! Strip Self-Attention and the full multi-head attention it is measured
//! against.
//!
//! Both mixers run through [`generalized_attention`]. The difference is the
//! per-head query/key width: full attention keeps `d / h` channels per head,
//! strip attention squeezes queries and keys to a single scalar per head and
//! attends over a spatially reduced key/value set of `N / k²` tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::nn::{Conv2d, ConvSpec, LayerNorm, Linear};
use crate::params::{join_path, Builder, Ctx};
use crate::scalar::Scalar;

/// How keys and values are spatially reduced before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrMode {
    /// `k x k` depthwise convolution with stride `k`.
    #[default]
    Conv,
    /// `k x k` average pooling with stride `k`.
    Pool,
}

/// Token and channel geometry of one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnShapes {
    /// Query tokens, `H * W`.
    pub n: usize,
    /// Key/value tokens after reduction, `N / k²`.
    pub ns: usize,
    pub d: usize,
    pub h: usize,
    pub k: usize,
}

impl AttnShapes {
    pub fn new((height, width): (usize, usize), d: usize, h: usize, k: usize) -> Result<Self> {
        if h == 0 || k == 0 || d == 0 {
            return Err(Error::Parameter(format!("d={d}, h={h}, k={k} must all be positive")));
        }
        if d % h != 0 {
            return Err(Error::Parameter(format!("{d} channels do not split into {h} heads")));
        }
        if k > 1 && (height % k != 0 || width % k != 0) {
            return Err(dim_err!("{height}x{width} map is not divisible by reduction ratio {k}"));
        }
        let n = height * width;
        if n == 0 {
            return Err(dim_err!("empty {height}x{width} map"));
        }
        Ok(Self { n, ns: n / (k * k), d, h, k })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.h
    }
}

/// Spatial reduction applied to keys/values when `k > 1`.
#[derive(Debug, Clone)]
pub struct SpatialReduction {
    pub path: String,
    pub ratio: usize,
    pub mode: SrMode,
    /// Present only in [`SrMode::Conv`].
    pub conv: Option<Conv2d>,
    pub norm: Option<LayerNorm>,
}

impl SpatialReduction {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, dim: usize, ratio: usize, mode: SrMode, with_norm: bool) -> Result<Self> {
        if ratio < 2 {
            return Err(Error::Config(format!("{path}: spatial reduction needs ratio > 1, got {ratio}")));
        }
        let conv = match mode {
            SrMode::Conv => Some(Conv2d::build(b, &join_path(path, "sr"), ConvSpec::depthwise(dim, ratio, ratio, 0))?),
            SrMode::Pool => None,
        };
        let norm = with_norm.then(|| LayerNorm::build(b, &join_path(path, "sr_norm"), dim)).transpose()?;
        Ok(Self { path: path.to_string(), ratio, mode, conv, norm })
    }

    pub fn param_count(&self) -> u64 {
        self.conv.as_ref().map_or(0, Conv2d::param_count) + self.norm.as_ref().map_or(0, LayerNorm::param_count)
    }
}

/// `[N, d]` tokens of an `H x W` map to `[N / k², d]` reduced tokens.
pub fn csr_spatial_reduce<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, (height, width): (usize, usize), sr: &SpatialReduction) -> Result<Var> {
    let tape = ctx.tape;
    let k = sr.ratio;
    let s = tape.shape(x);
    let [n, d] = s.as_slice() else {
        return Err(dim_err!("spatial reduction expects [N, d] tokens, got {s:?}"));
    };
    let (n, d) = (*n, *d);
    if n != height * width {
        return Err(dim_err!("{n} tokens do not form a {height}x{width} map"));
    }
    if height % k != 0 || width % k != 0 {
        return Err(dim_err!("{height}x{width} map is not divisible by reduction ratio {k}"));
    }
    let map = tape.transpose(x)?;
    let map = tape.reshape(map, &[1, d, height, width])?;
    let reduced = match (&sr.mode, &sr.conv) {
        (SrMode::Conv, Some(conv)) => conv.forward(ctx, map)?,
        (SrMode::Pool, _) => tape.avg_pool2d(map, k, k)?,
        (SrMode::Conv, None) => return Err(Error::Parameter("conv reduction without weights".into())),
    };
    let ns = (height / k) * (width / k);
    let tokens = tape.reshape(reduced, &[d, ns])?;
    let tokens = tape.transpose(tokens)?;
    match &sr.norm {
        Some(norm) => norm.forward(ctx, tokens),
        None => Ok(tokens),
    }
}

/// Query, key, value and output projections shared by both mixers.
#[derive(Debug, Clone)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl Projections {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, dim: usize, qk_width: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::build(b, &join_path(path, "q"), dim, qk_width, true)?,
            k: Linear::build(b, &join_path(path, "k"), dim, qk_width, true)?,
            v: Linear::build(b, &join_path(path, "v"), dim, dim, true)?,
            proj: Linear::build(b, &join_path(path, "proj"), dim, dim, true)?,
        })
    }

    fn param_count(&self) -> u64 {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.proj.param_count()
    }
}

/// Settings for a strip attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub sr_ratio: usize,
    pub sr_mode: SrMode,
    /// Layer norm after the reduction.
    pub sr_norm: bool,
    pub dropout: f64,
}

impl SsaConfig {
    pub fn new(dim: usize, heads: usize, sr_ratio: usize) -> Self {
        Self { dim, heads, sr_ratio, sr_mode: SrMode::Conv, sr_norm: true, dropout: 0.0 }
    }
}

/// Strip attention weights. Queries and keys project `d -> h`, one scalar
/// per head per token.
#[derive(Debug, Clone)]
pub struct SsaParams {
    pub path: String,
    pub heads: usize,
    pub dim: usize,
    pub proj: Projections,
    /// Present iff the reduction ratio exceeds one.
    pub reduction: Option<SpatialReduction>,
    pub dropout: f64,
}

impl SsaParams {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, cfg: &SsaConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("{path}: {} channels do not split into {} heads", cfg.dim, cfg.heads)));
        }
        if cfg.sr_ratio == 0 {
            return Err(Error::Config(format!("{path}: reduction ratio must be positive")));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("{path}: dropout {} outside [0, 1)", cfg.dropout)));
        }
        let proj = Projections::build(b, path, cfg.dim, cfg.heads)?;
        let reduction =
            (cfg.sr_ratio > 1).then(|| SpatialReduction::build(b, path, cfg.dim, cfg.sr_ratio, cfg.sr_mode, cfg.sr_norm)).transpose()?;
        Ok(Self { path: path.to_string(), heads: cfg.heads, dim: cfg.dim, proj, reduction, dropout: cfg.dropout })
    }

    pub fn sr_ratio(&self) -> usize {
        self.reduction.as_ref().map_or(1, |r| r.ratio)
    }

    pub fn param_count(&self) -> u64 {
        self.proj.param_count() + self.reduction.as_ref().map_or(0, SpatialReduction::param_count)
    }
}

/// Standard multi-head attention weights, all projections `d -> d`.
#[derive(Debug, Clone)]
pub struct MhsaParams {
    pub path: String,
    pub heads: usize,
    pub dim: usize,
    pub proj: Projections,
}

impl MhsaParams {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{path}: {dim} channels do not split into {heads} heads")));
        }
        Ok(Self { path: path.to_string(), heads, dim, proj: Projections::build(b, path, dim, dim)? })
    }

    pub fn param_count(&self) -> u64 {
        self.proj.param_count()
    }
}

/// Output of an attention call, with the per-head attention maps
/// (`[N, Ns]`, rows summing to one) kept for inspection.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub maps: Vec<Var>,
}

/// Everything [`generalized_attention`] needs besides the input.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec<'p> {
    pub path: &'p str,
    pub heads: usize,
    pub proj: &'p Projections,
    pub reduction: Option<&'p SpatialReduction>,
    /// Squeeze queries/keys to one channel per head.
    pub squeeze: bool,
    pub sr_ratio: usize,
    pub dropout: f64,
}

impl<'p> AttentionSpec<'p> {
    pub fn strip(p: &'p SsaParams) -> Self {
        Self {
            path: &p.path,
            heads: p.heads,
            proj: &p.proj,
            reduction: p.reduction.as_ref(),
            squeeze: true,
            sr_ratio: p.sr_ratio(),
            dropout: p.dropout,
        }
    }

    pub fn full(p: &'p MhsaParams) -> Self {
        Self { path: &p.path, heads: p.heads, proj: &p.proj, reduction: None, squeeze: false, sr_ratio: 1, dropout: 0.0 }
    }
}

/// One attention routine covering both mixers.
///
/// With `squeeze = false` and `sr_ratio = 1` this is standard multi-head
/// attention with scale `sqrt(d / h)`; with `squeeze = true` it is strip
/// attention with scale 1 (the per-head key width).
pub fn generalized_attention<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, hw: (usize, usize), spec: &AttentionSpec<'_>) -> Result<AttentionOutput> {
    let tape = ctx.tape;
    let s = tape.shape(x);
    let [n, d] = s.as_slice() else {
        return Err(dim_err!("attention expects [N, d] tokens, got {s:?}"));
    };
    let (n, d) = (*n, *d);
    let h = spec.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::Parameter(format!("{d} channels do not split into {h} heads")));
    }
    if spec.proj.q.in_features != d {
        return Err(dim_err!("{}: projections expect width {}, input has {d}", spec.path, spec.proj.q.in_features));
    }
    let qk_width = if spec.squeeze { h } else { d };
    for (lin, name) in [(&spec.proj.q, "query"), (&spec.proj.k, "key")] {
        if lin.out_features != qk_width {
            return Err(Error::Parameter(format!(
                "{}: {name} projection has width {} but squeeze={} needs {qk_width}",
                spec.path, lin.out_features, spec.squeeze
            )));
        }
    }
    let reduction = match (spec.sr_ratio, spec.reduction) {
        (1, None) => None,
        (k, Some(r)) if k > 1 && r.ratio == k => Some(r),
        (k, r) => {
            return Err(Error::Parameter(format!(
                "{}: reduction ratio {k} inconsistent with {} reduction weights",
                spec.path,
                r.map_or("missing".to_string(), |r| format!("ratio-{}", r.ratio))
            )))
        }
    };
    if n != hw.0 * hw.1 {
        return Err(dim_err!("{n} tokens do not form a {}x{} map", hw.0, hw.1));
    }

    let _s = tape.scope(spec.path);
    let q = spec.proj.q.forward(ctx, x)?;
    let kv_src = match reduction {
        Some(r) => csr_spatial_reduce(ctx, x, hw, r)?,
        None => x,
    };
    let k = spec.proj.k.forward(ctx, kv_src)?;
    let v = spec.proj.v.forward(ctx, kv_src)?;

    let head_qk = qk_width / h;
    let head_v = d / h;
    let inv_scale = 1.0 / (head_qk as f64).sqrt();
    let mut heads = Vec::with_capacity(h);
    let mut maps = Vec::with_capacity(h);
    for i in 0..h {
        let qi = tape.narrow(q, 1, i * head_qk, head_qk)?;
        let ki = tape.narrow(k, 1, i * head_qk, head_qk)?;
        let vi = tape.narrow(v, 1, i * head_v, head_v)?;
        let logits = tape.matmul(qi, tape.transpose(ki)?)?;
        let logits = tape.mul_scalar(logits, inv_scale)?;
        let attn = tape.softmax(logits, 1)?;
        heads.push(tape.matmul(attn, vi)?);
        maps.push(attn);
    }
    let merged = if h == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let out = spec.proj.proj.forward(ctx, merged)?;
    let out = ctx.dropout(out, spec.dropout)?;
    Ok(AttentionOutput { out, maps })
}

/// Strip Self-Attention over the `[N, d]` tokens of an `H x W` map.
pub fn strip_attention<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, hw: (usize, usize), params: &SsaParams) -> Result<AttentionOutput> {
    let s = ctx.tape.shape(x);
    if s.len() == 2 {
        AttnShapes::new(hw, s[1], params.heads, params.sr_ratio())?;
    }
    generalized_attention(ctx, x, hw, &AttentionSpec::strip(params))
}

/// Standard multi-head self-attention over `[N, d]` tokens.
pub fn reference_mhsa<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, params: &MhsaParams) -> Result<AttentionOutput> {
    let n = ctx.tape.shape(x).first().copied().unwrap_or(0);
    generalized_attention(ctx, x, (n, 1), &AttentionSpec::full(params))
}

/// Applies a token mixer independently to each image of `[B, N, d]` tokens.
pub fn per_image<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, mut f: impl FnMut(Var) -> Result<AttentionOutput>) -> Result<(Var, Vec<Var>)> {
    let tape = ctx.tape;
    let s = tape.shape(x);
    let [b, n, d] = s.as_slice() else {
        return Err(dim_err!("expected [B, N, d] tokens, got {s:?}"));
    };
    let (b, n, d) = (*b, *n, *d);
    let mut outs = Vec::with_capacity(b);
    let mut maps = Vec::new();
    for i in 0..b {
        let xi = if b == 1 { x } else { tape.narrow(x, 0, i, 1)? };
        let xi = tape.reshape(xi, &[n, d])?;
        let r = f(xi)?;
        outs.push(tape.reshape(r.out, &[1, n, d])?);
        maps.extend(r.maps);
    }
    let out = if b == 1 { outs[0] } else { tape.concat(&outs, 0)? };
    Ok((out, maps))
}
