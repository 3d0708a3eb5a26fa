//! Parameterized layers. Each layer remembers its dotted path so that its
//! parameters and the MACs it performs are reported under the same name.

use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::params::{join_path, Builder, Ctx, ParamId};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
/// Standard deviation for linear and attention projections.
pub const LINEAR_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub path: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let weight = b.trunc_normal(&join_path(path, "weight"), &[out_features, in_features], LINEAR_INIT_STD)?;
        let bias = bias.then(|| b.constant(&join_path(path, "bias"), &[out_features], 0.0, true)).transpose()?;
        Ok(Self { path: path.to_string(), weight, bias, in_features, out_features })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let _s = ctx.tape.scope(self.path.as_str());
        ctx.tape.linear(x, ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }

    pub fn param_count(&self) -> u64 {
        (self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }) as u64
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub path: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Construction arguments for [`Conv2d`].
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self { in_channels: cin, out_channels: cout, kernel: 1, stride: 1, padding: 0, groups: 1, bias: true }
    }

    /// `k x k` depthwise conv; `padding` keeps resolution when stride is 1.
    pub fn depthwise(c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { in_channels: c, out_channels: c, kernel, stride, padding, groups: c, bias: true }
    }

    pub fn dense(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { in_channels: cin, out_channels: cout, kernel, stride, padding, groups: 1, bias: true }
    }
}

impl Conv2d {
    /// Weights drawn from `N(0, 2 / fan_out)` with `fan_out = k*k*Cout/groups`.
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, spec: ConvSpec) -> Result<Self> {
        let ConvSpec { in_channels, out_channels, kernel, stride, padding, groups, bias } = spec;
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(crate::Error::Config(format!("{path}: groups {groups} must divide {in_channels} and {out_channels}")));
        }
        let fan_out = kernel * kernel * out_channels / groups;
        let weight =
            b.normal(&join_path(path, "weight"), &[out_channels, in_channels / groups, kernel, kernel], (2.0 / fan_out as f64).sqrt())?;
        let bias = bias.then(|| b.constant(&join_path(path, "bias"), &[out_channels], 0.0, true)).transpose()?;
        Ok(Self { path: path.to_string(), weight, bias, in_channels, out_channels, kernel, stride, padding, groups })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let _s = ctx.tape.scope(self.path.as_str());
        let shape = ctx.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(dim_err!("{}: expected [N, {}, H, W], got {shape:?}", self.path, self.in_channels));
        }
        ctx.tape.conv2d(x, ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.stride, self.padding, self.groups)
    }

    pub fn param_count(&self) -> u64 {
        let w = self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel;
        (w + if self.bias.is_some() { self.out_channels } else { 0 }) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub path: String,
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize) -> Result<Self> {
        let gain = b.constant(&join_path(path, "weight"), &[channels], 1.0, true)?;
        let bias = b.constant(&join_path(path, "bias"), &[channels], 0.0, true)?;
        Ok(Self { path: path.to_string(), gain, bias, channels })
    }

    /// Normalizes over the last axis.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let _s = ctx.tape.scope(self.path.as_str());
        ctx.tape.layer_norm(x, ctx.param(self.gain), ctx.param(self.bias), LN_EPS)
    }

    /// Normalizes the channel axis of an NCHW map via a channel-last view.
    pub fn forward_nchw<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = ctx.tape.permute(x, &[0, 2, 3, 1])?;
        let t = self.forward(ctx, t)?;
        ctx.tape.permute(t, &[0, 3, 1, 2])
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// Batch norm with frozen statistics (inference semantics only).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub path: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            path: path.to_string(),
            gamma: b.constant(&join_path(path, "weight"), &[channels], 1.0, true)?,
            beta: b.constant(&join_path(path, "bias"), &[channels], 0.0, true)?,
            running_mean: b.constant(&join_path(path, "running_mean"), &[channels], 0.0, false)?,
            running_var: b.constant(&join_path(path, "running_var"), &[channels], 1.0, false)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let _s = ctx.tape.scope(self.path.as_str());
        ctx.tape.batch_norm_inference(
            x,
            ctx.param(self.gamma),
            ctx.param(self.beta),
            ctx.param(self.running_mean),
            ctx.param(self.running_var),
            BN_EPS,
        )
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// `[B, C, H, W] -> [B, H*W, C]`
pub fn nchw_to_tokens<T: Scalar>(ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x);
    let [b, c, h, w] = s.as_slice() else {
        return Err(dim_err!("expected NCHW, got {s:?}"));
    };
    let t = ctx.tape.permute(x, &[0, 2, 3, 1])?;
    ctx.tape.reshape(t, &[*b, h * w, *c])
}

/// `[B, H*W, C] -> [B, C, H, W]`
pub fn tokens_to_nchw<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
    let s = ctx.tape.shape(x);
    let [b, n, c] = s.as_slice() else {
        return Err(dim_err!("expected [B, N, C], got {s:?}"));
    };
    if *n != h * w {
        return Err(dim_err!("{n} tokens do not form a {h}x{w} map"));
    }
    let t = ctx.tape.reshape(x, &[*b, h, w, *c])?;
    ctx.tape.permute(t, &[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn param_counts_match_store() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let fc = Linear::build(&mut b, "fc", 4, 8, true).unwrap();
        let dw = Conv2d::build(&mut b, "dw", ConvSpec::depthwise(32, 3, 1, 1)).unwrap();
        assert_eq!(fc.param_count(), 40);
        assert_eq!(dw.param_count(), 320);
        assert_eq!(store.count_trainable("fc"), 40);
        assert_eq!(store.count_trainable("dw"), 320);
    }

    #[test]
    fn pointwise_conv_equals_per_position_linear() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 1);
        let conv = Conv2d::build(&mut b, "pw", ConvSpec::pointwise(3, 5)).unwrap();
        let mut rng = crate::RngStream::new(5, 9);
        store.randomize(&mut rng, 1.0);
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.normal()).collect();
        let x = Tensor::new(&[2, 3, 4, 4], x).unwrap();

        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let xv = tape.leaf(x, false);
        let y = tokens_to_nchw(&ctx, nchw_to_tokens(&ctx, conv.forward(&ctx, xv).unwrap()).unwrap(), (4, 4)).unwrap();

        let tokens = nchw_to_tokens(&ctx, xv).unwrap();
        let w = tape.reshape(ctx.param(conv.weight), &[5, 3]).unwrap();
        let lin = tape.linear(tokens, w, conv.bias.map(|b| ctx.param(b))).unwrap();
        let lin = tokens_to_nchw(&ctx, lin, (4, 4)).unwrap();
        let diff = tape.value(y).unwrap().max_abs_diff(&tape.value(lin).unwrap()).unwrap();
        assert!(diff < 1e-12, "diff {diff}");
    }
}
