//! Four-stage hybrid backbone built from Hybrid Perception Blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::local::{LimParams, MlpParams, PatchEmbed, Stem, SE_REDUCTION};
use crate::nn::{nchw_to_tokens, tokens_to_nchw, Conv2d, ConvSpec, LayerNorm, Linear};
use crate::params::{join_path, Builder, Ctx, ParamStore};
use crate::rng::{RngStream, DATA_STREAM, DROPOUT_STREAM};
use crate::scalar::Scalar;
use crate::ssa::{per_image, strip_attention, SrMode, SsaConfig, SsaParams};
use crate::tensor::Tensor;

/// Spatial reduction ratio per stage.
pub const DEFAULT_SR_RATIOS: [usize; 4] = [8, 4, 2, 1];
/// Attention heads per stage.
pub const DEFAULT_HEADS: [usize; 4] = [1, 2, 4, 8];
/// Stride of each stage output relative to the input image.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const VARIANT_NAMES: [&str; 5] = ["mini", "T", "XS", "S", "M"];

fn default_true() -> bool {
    true
}

fn default_se_ratio() -> usize {
    SE_REDUCTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub sr_ratio: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub lim_enabled: bool,
    #[serde(default)]
    pub sr_mode: SrMode,
    /// Layer norm after spatial reduction.
    #[serde(default = "default_true")]
    pub sr_norm: bool,
    #[serde(default = "default_se_ratio")]
    pub se_ratio: usize,
}

/// Geometry of one stage at a concrete input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    pub sr_ratio: usize,
    pub blocks: usize,
}

impl StageShape {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

impl VariantConfig {
    /// One of the five published configurations (case-insensitive).
    pub fn named(name: &str) -> Result<Self> {
        let (canon, blocks, channels): (&str, [usize; 4], [usize; 4]) = match name.to_ascii_lowercase().as_str() {
            "mini" => ("mini", [2, 2, 2, 2], [32, 64, 128, 256]),
            "t" => ("T", [2, 2, 6, 2], [48, 64, 128, 256]),
            "xs" => ("XS", [2, 2, 10, 2], [48, 64, 128, 256]),
            "s" => ("S", [2, 4, 24, 4], [48, 64, 128, 256]),
            "m" => ("M", [2, 4, 20, 2], [96, 128, 256, 512]),
            _ => return Err(Error::Config(format!("unknown variant {name:?}; expected one of {}", VARIANT_NAMES.join(", ")))),
        };
        Ok(Self::from_plan(canon, blocks, channels, 1000))
    }

    pub fn all_named() -> Vec<Self> {
        VARIANT_NAMES.iter().map(|n| Self::named(n).expect("known variant")).collect()
    }

    /// Custom plan using the default ratios, heads and MLP width.
    pub fn from_plan(name: &str, blocks: [usize; 4], channels: [usize; 4], num_classes: usize) -> Self {
        let stages = (0..4)
            .map(|i| StageConfig {
                channels: channels[i],
                blocks: blocks[i],
                sr_ratio: DEFAULT_SR_RATIOS[i],
                heads: DEFAULT_HEADS[i],
                mlp_ratio: crate::local::MLP_RATIO,
            })
            .collect();
        Self {
            name: name.to_string(),
            stages,
            num_classes,
            lim_enabled: true,
            sr_mode: SrMode::Conv,
            sr_norm: true,
            se_ratio: SE_REDUCTION,
        }
    }

    /// Small network for tests and toy training.
    pub fn toy(blocks: [usize; 4], num_classes: usize) -> Self {
        Self::from_plan("toy", blocks, [8, 16, 16, 32], num_classes)
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.channels).collect()
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.blocks).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if self.stages.len() != 4 {
            return err(format!("expected 4 stages, got {}", self.stages.len()));
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        if self.stages[0].channels % 2 != 0 {
            return err("stage 1 width must be even (stem halves it)".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let stage = i + 1;
            if s.channels == 0 || s.heads == 0 || s.channels % s.heads != 0 {
                return err(format!("stage {stage}: {} channels do not split into {} heads", s.channels, s.heads));
            }
            if ![1, 2, 4, 8].contains(&s.sr_ratio) {
                return err(format!("stage {stage}: sr_ratio {} not in {{1, 2, 4, 8}}", s.sr_ratio));
            }
            if s.mlp_ratio == 0 {
                return err(format!("stage {stage}: mlp_ratio must be at least 1"));
            }
            if self.lim_enabled && (self.se_ratio == 0 || s.channels % self.se_ratio != 0) {
                return err(format!("stage {stage}: {} channels not divisible by SE ratio {}", s.channels, self.se_ratio));
            }
        }
        Ok(())
    }

    /// Per-stage geometry for an `height x width` input.
    pub fn stage_shapes(&self, (height, width): (usize, usize)) -> Result<Vec<StageShape>> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(dim_err!("input {height}x{width} is not divisible by 32"));
        }
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let stride = PYRAMID_STRIDES[i];
                let (h, w) = (height / stride, width / stride);
                if h % s.sr_ratio != 0 || w % s.sr_ratio != 0 {
                    return Err(dim_err!("stage {} map {h}x{w} not divisible by sr_ratio {}", i + 1, s.sr_ratio));
                }
                Ok(StageShape {
                    stage: i + 1,
                    height: h,
                    width: w,
                    channels: s.channels,
                    heads: s.heads,
                    sr_ratio: s.sr_ratio,
                    blocks: s.blocks,
                })
            })
            .collect()
    }
}

/// Hybrid Perception Block weights.
#[derive(Debug, Clone)]
pub struct HpbParams {
    pub path: String,
    pub dw: Conv2d,
    pub norm1: LayerNorm,
    pub ssa: SsaParams,
    /// Pre-norm and module of the local branch; absent when LIM is disabled.
    pub lim: Option<(LayerNorm, LimParams)>,
    pub norm3: LayerNorm,
    pub mlp: MlpParams,
    pub channels: usize,
}

/// Block output plus the attention maps of every image and head.
pub struct HpbOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl HpbParams {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, stage: &StageConfig, cfg: &VariantConfig) -> Result<Self> {
        let c = stage.channels;
        let ssa_cfg =
            SsaConfig { dim: c, heads: stage.heads, sr_ratio: stage.sr_ratio, sr_mode: cfg.sr_mode, sr_norm: cfg.sr_norm, dropout: 0.0 };
        let dw = Conv2d::build(b, &join_path(path, "dw"), ConvSpec::depthwise(c, 3, 1, 1))?;
        let norm1 = LayerNorm::build(b, &join_path(path, "norm1"), c)?;
        let ssa = SsaParams::build(b, &join_path(path, "ssa"), &ssa_cfg)?;
        let lim = if cfg.lim_enabled {
            Some((LayerNorm::build(b, &join_path(path, "norm2"), c)?, LimParams::build(b, &join_path(path, "lim"), c, cfg.se_ratio)?))
        } else {
            None
        };
        let norm3 = LayerNorm::build(b, &join_path(path, "norm3"), c)?;
        let mlp = MlpParams::build(b, &join_path(path, "mlp"), c, stage.mlp_ratio)?;
        Ok(Self { path: path.to_string(), dw, norm1, ssa, lim, norm3, mlp, channels: c })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_maps(ctx, x)?.out)
    }

    /// conv residual, attention residual, local residual, MLP residual.
    pub fn forward_with_maps<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<HpbOutput> {
        let t = ctx.tape;
        let s = t.shape(x);
        let &[_, c, h, w] = s.as_slice() else {
            return Err(dim_err!("{}: expected NCHW input, got {s:?}", self.path));
        };
        if c != self.channels {
            return Err(dim_err!("{}: expected {} channels, got {c}", self.path, self.channels));
        }
        let f_conv = t.add(self.dw.forward(ctx, x)?, x)?;
        let tokens = nchw_to_tokens(ctx, f_conv)?;

        let normed = self.norm1.forward(ctx, tokens)?;
        let (attn, maps) = per_image(ctx, normed, |xi| strip_attention(ctx, xi, (h, w), &self.ssa))?;
        let f_ssa = t.add(attn, tokens)?;

        let f_lim = match &self.lim {
            Some((norm2, lim)) => {
                let n2 = tokens_to_nchw(ctx, norm2.forward(ctx, f_ssa)?, (h, w))?;
                let local = nchw_to_tokens(ctx, lim.forward(ctx, n2)?)?;
                t.add(local, f_ssa)?
            }
            None => f_ssa,
        };
        let f_mlp = t.add(self.mlp.forward(ctx, self.norm3.forward(ctx, f_lim)?)?, f_lim)?;
        Ok(HpbOutput { out: tokens_to_nchw(ctx, f_mlp, (h, w))?, attention: maps })
    }

    /// Parameters of the local branch including its pre-norm.
    pub fn lim_branch_params(&self) -> u64 {
        self.lim.as_ref().map_or(0, |(n, l)| n.param_count() + l.param_count())
    }
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub embed: PatchEmbed,
    pub blocks: Vec<HpbParams>,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub norm: LayerNorm,
    pub fc: Linear,
}

/// Layer structure of a backbone; the weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: VariantConfig,
    pub stem: Stem,
    pub stages: Vec<StageParams>,
    pub head: HeadParams,
}

/// Logits and the four stage outputs.
pub struct ModelOutput {
    pub logits: Var,
    pub pyramid: [Var; 4],
    pub attention: Vec<Var>,
}

pub struct Model<T> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl Architecture {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, config: &VariantConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::build(b, "stem", 3, config.stages[0].channels)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.stages[0].channels;
        for (i, sc) in config.stages.iter().enumerate() {
            let prefix = format!("stage{}", i + 1);
            let embed = PatchEmbed::build(b, &join_path(&prefix, "embed"), cin, sc.channels)?;
            let blocks = (0..sc.blocks)
                .map(|j| HpbParams::build(b, &join_path(&prefix, &format!("block{j}")), sc, config))
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageParams { embed, blocks });
            cin = sc.channels;
        }
        let head =
            HeadParams { norm: LayerNorm::build(b, "head.norm", cin)?, fc: Linear::build(b, "head.fc", cin, config.num_classes, true)? };
        Ok(Self { config: config.clone(), stem, stages, head })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, images: Var) -> Result<ModelOutput> {
        let t = ctx.tape;
        let s = t.shape(images);
        let &[_, 3, h, w] = s.as_slice() else {
            return Err(dim_err!("expected [N, 3, H, W] images, got {s:?}"));
        };
        self.config.stage_shapes((h, w))?;
        let mut x = self.stem.forward(ctx, images)?;
        let mut pyramid = Vec::with_capacity(4);
        let mut attention = Vec::new();
        for stage in &self.stages {
            x = stage.embed.forward(ctx, x)?;
            for block in &stage.blocks {
                let o = block.forward_with_maps(ctx, x)?;
                x = o.out;
                attention.extend(o.attention);
            }
            pyramid.push(x);
        }
        let pooled = t.global_avg_pool(x)?;
        let logits = self.head.fc.forward(ctx, self.head.norm.forward(ctx, pooled)?)?;
        Ok(ModelOutput { logits, pyramid: pyramid.try_into().expect("four stages"), attention })
    }
}

/// Instantiates a configuration with weights drawn from `seed`.
pub fn build_variant<T: Scalar>(config: &VariantConfig, seed: u64) -> Result<Model<T>> {
    let mut store = ParamStore::new();
    let arch = Architecture::build(&mut Builder::new(&mut store, seed), config)?;
    Ok(Model { arch, store })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &VariantConfig {
        &self.arch.config
    }

    pub fn param_count(&self) -> u64 {
        self.store.count_trainable("")
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, images: Var) -> Result<ModelOutput> {
        self.arch.forward(ctx, images)
    }

    /// Inference forward returning logits and the feature pyramid.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, [Tensor<T>; 4])> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store);
        let x = tape.leaf(images.clone(), false);
        let out = self.forward(&ctx, x)?;
        let pyramid = out.pyramid.map(|v| (*tape.value(v).expect("live values")).clone());
        Ok(((*tape.value(out.logits)?).clone(), pyramid))
    }
}

/// Seeded labeled images: each class is a Gaussian bump at its own position
/// and color, plus pixel noise.
pub fn gaussian_blobs<T: Scalar>(samples: usize, classes: usize, res: usize, seed: u64) -> Result<(Tensor<T>, Vec<usize>)> {
    if samples == 0 || classes < 2 {
        return Err(Error::Parameter(format!("need samples >= 1 and classes >= 2, got {samples}, {classes}")));
    }
    let mut rng = RngStream::new(seed, DATA_STREAM);
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let sigma = res as f64 / 6.0;
    let mut data = Vec::with_capacity(samples * 3 * res * res);
    for &label in &labels {
        let angle = std::f64::consts::TAU * label as f64 / classes as f64;
        let cy = res as f64 * (0.5 + 0.25 * angle.sin()) + rng.normal();
        let cx = res as f64 * (0.5 + 0.25 * angle.cos()) + rng.normal();
        for ch in 0..3 {
            let tint = 0.5 + 0.5 * (angle + ch as f64 * 2.0).cos();
            for y in 0..res {
                for x in 0..res {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = tint * (-r2 / (2.0 * sigma * sigma)).exp() + 0.1 * rng.normal();
                    data.push(T::from_f64_lossy(v));
                }
            }
        }
    }
    Ok((Tensor::new(&[samples, 3, res, res], data)?, labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 200, lr: 0.01, momentum: 0.9, seed: 0 }
    }
}

/// Full-batch SGD with momentum on cross-entropy; returns the loss at each
/// step (measured before that step's update).
pub fn train_toy<T: Scalar>(model: &mut Model<T>, images: &Tensor<T>, labels: &[usize], opts: &TrainOptions) -> Result<Vec<f64>> {
    if opts.steps == 0 {
        return Err(Error::Parameter("steps must be at least 1".into()));
    }
    let mut velocity: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
    let lr = T::from_f64_lossy(opts.lr);
    let mu = T::from_f64_lossy(opts.momentum);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let rng = RngStream::new(opts.seed ^ step as u64, DROPOUT_STREAM);
        let ctx = Ctx::with_rng(&tape, &model.store, true, rng);
        let numeric = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        };
        let x = tape.leaf(images.clone(), false);
        let out = model.arch.forward(&ctx, x).map_err(numeric)?;
        let loss = tape.cross_entropy(out.logits, labels).map_err(numeric)?;
        let value = tape.value(loss)?.item()?.to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("step {step}: loss is {value}")));
        }
        trace.push(value);
        let grads = tape.backward(loss)?;
        let bound = ctx.bound_params();
        drop(ctx);
        for (id, var) in bound {
            let Some(g) = grads.get(var) else { continue };
            let v = velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi;
            }
            let p = model.store.get_mut(id);
            for (pi, &vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi = *pi - lr * vi;
            }
        }
    }
    Ok(trace)
}
