//! Convolutional sub-blocks: the Local Interaction Module, squeeze-and-
//! excitation, the token MLP, the stem and the per-stage patch embedding.

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, LayerNorm, Linear};
use crate::params::{join_path, Builder, Ctx};
use crate::scalar::Scalar;

/// Default squeeze-and-excitation reduction ratio.
pub const SE_REDUCTION: usize = 4;
/// Default MLP expansion ratio.
pub const MLP_RATIO: usize = 4;

fn expect_channels<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, c: usize, what: &str) -> Result<[usize; 4]> {
    let s = ctx.tape.shape(x);
    match s.as_slice() {
        &[n, ch, h, w] if ch == c => Ok([n, ch, h, w]),
        _ => Err(dim_err!("{what}: expected [N, {c}, H, W], got {s:?}")),
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone)]
pub struct SeParams {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
    pub ratio: usize,
}

impl SeParams {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::Parameter(format!("{path}: {channels} channels not divisible by SE ratio {ratio}")));
        }
        let hidden = channels / ratio;
        Ok(Self {
            reduce: Linear::build(b, &join_path(path, "reduce"), channels, hidden, true)?,
            expand: Linear::build(b, &join_path(path, "expand"), hidden, channels, true)?,
            channels,
            ratio,
        })
    }

    /// Per-channel gates `[N, C]`, each in `(0, 1)`.
    pub fn gates<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<Var> {
        expect_channels(ctx, f, self.channels, "se")?;
        let pooled = ctx.tape.global_avg_pool(f)?;
        let hidden = ctx.tape.relu(self.reduce.forward(ctx, pooled)?)?;
        ctx.tape.sigmoid(self.expand.forward(ctx, hidden)?)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<Var> {
        let g = self.gates(ctx, f)?;
        ctx.tape.scale_channels(f, g)
    }

    pub fn param_count(&self) -> u64 {
        self.reduce.param_count() + self.expand.param_count()
    }
}

/// Local Interaction Module: a depthwise-separable conv with an SE gate.
#[derive(Debug, Clone)]
pub struct LimParams {
    pub pw1: Conv2d,
    pub dw: Conv2d,
    pub se: SeParams,
    pub pw2: Conv2d,
    pub channels: usize,
}

impl LimParams {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize, se_ratio: usize) -> Result<Self> {
        Ok(Self {
            pw1: Conv2d::build(b, &join_path(path, "pw1"), ConvSpec::pointwise(channels, channels))?,
            dw: Conv2d::build(b, &join_path(path, "dw"), ConvSpec::depthwise(channels, 3, 1, 1))?,
            se: SeParams::build(b, &join_path(path, "se"), channels, se_ratio)?,
            pw2: Conv2d::build(b, &join_path(path, "pw2"), ConvSpec::pointwise(channels, channels))?,
            channels,
        })
    }

    /// `PW(ReLU(SE(DW(ReLU(PW(f))))))`
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<Var> {
        expect_channels(ctx, f, self.channels, "lim")?;
        let t = ctx.tape;
        let ds = self.dw.forward(ctx, t.relu(self.pw1.forward(ctx, f)?)?)?;
        let gated = t.relu(self.se.forward(ctx, ds)?)?;
        self.pw2.forward(ctx, gated)
    }

    pub fn param_count(&self) -> u64 {
        self.pw1.param_count() + self.dw.param_count() + self.se.param_count() + self.pw2.param_count()
    }
}

/// Two-layer token MLP with GELU.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub ratio: usize,
}

impl MlpParams {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Parameter(format!("{path}: MLP ratio must be at least 1")));
        }
        Ok(Self {
            fc1: Linear::build(b, &join_path(path, "fc1"), channels, channels * ratio, true)?,
            fc2: Linear::build(b, &join_path(path, "fc2"), channels * ratio, channels, true)?,
            ratio,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<Var> {
        let h = ctx.tape.gelu(self.fc1.forward(ctx, f)?)?;
        self.fc2.forward(ctx, h)
    }

    pub fn param_count(&self) -> u64 {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Three 3x3 convs (`3 -> C/2 -> C/2 -> C`), each followed by batch norm and
/// GELU; only the first has stride 2.
#[derive(Debug, Clone)]
pub struct Stem {
    pub convs: [Conv2d; 3],
    pub norms: [BatchNorm2d; 3],
    pub out_channels: usize,
}

impl Stem {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        if out_channels < 2 || out_channels % 2 != 0 {
            return Err(Error::Config(format!("stem width {out_channels} must be even")));
        }
        let mid = out_channels / 2;
        let plan = [(in_channels, mid, 2), (mid, mid, 1), (mid, out_channels, 1)];
        let mut convs = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            convs.push(Conv2d::build(b, &join_path(path, &format!("conv{}", i + 1)), ConvSpec::dense(cin, cout, 3, stride, 1))?);
            norms.push(BatchNorm2d::build(b, &join_path(path, &format!("bn{}", i + 1)), cout)?);
        }
        Ok(Self { convs: convs.try_into().expect("three convs"), norms: norms.try_into().expect("three norms"), out_channels })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, img: Var) -> Result<Var> {
        let [_, _, h, w] = expect_channels(ctx, img, self.convs[0].in_channels, "stem")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("stem needs even spatial dims, got {h}x{w}"));
        }
        let mut x = img;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = ctx.tape.gelu(norm.forward(ctx, conv.forward(ctx, x)?)?)?;
        }
        Ok(x)
    }

    pub fn param_count(&self) -> u64 {
        self.convs.iter().map(Conv2d::param_count).sum::<u64>() + self.norms.iter().map(BatchNorm2d::param_count).sum::<u64>()
    }
}

/// Overlapping 3x3 stride-2 conv followed by channel layer norm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, path: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::build(b, &join_path(path, "conv"), ConvSpec::dense(cin, cout, 3, 2, 1))?,
            norm: LayerNorm::build(b, &join_path(path, "norm"), cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<Var> {
        let [_, _, h, w] = expect_channels(ctx, f, self.conv.in_channels, "patch embed")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("patch embedding needs even spatial dims, got {h}x{w}"));
        }
        let y = self.conv.forward(ctx, f)?;
        self.norm.forward_nchw(ctx, y)
    }

    pub fn param_count(&self) -> u64 {
        self.conv.param_count() + self.norm.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamStore;
    use crate::rng::RngStream;
    use crate::tensor::Tensor;

    fn random_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, 99);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn se_with_zero_expand_halves_input() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let se = SeParams::build(&mut b, "se", 8, 4).unwrap();
        store.randomize(&mut RngStream::new(1, 1), 0.3);
        store.set(se.expand.weight, Tensor::zeros(&[8, 2])).unwrap();
        store.set(se.expand.bias.unwrap(), Tensor::zeros(&[8])).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let xt = random_map(&[2, 8, 3, 3], 3);
        let x = tape.leaf(xt.clone(), false);
        let y = tape.value(se.forward(&ctx, x).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(xt.data()) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn se_gates_are_strictly_inside_unit_interval() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let se = SeParams::build(&mut b, "se", 8, 4).unwrap();
        store.randomize(&mut RngStream::new(2, 1), 2.0);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(random_map(&[3, 8, 4, 4], 5), false);
        let g = tape.value(se.gates(&ctx, x).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let z = tape.leaf(Tensor::zeros(&[1, 8, 2, 2]), false);
        assert!(tape.value(se.forward(&ctx, z).unwrap()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        assert!(matches!(SeParams::build(&mut b, "se", 6, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn lim_preserves_shape_and_zero_pw2_annihilates() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let lim = LimParams::build(&mut b, "lim", 8, SE_REDUCTION).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(random_map(&[1, 8, 7, 7], 1), false);
        assert_eq!(tape.shape(lim.forward(&ctx, x).unwrap()), vec![1, 8, 7, 7]);

        store.set(lim.pw2.weight, Tensor::zeros(&[8, 8, 1, 1])).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(random_map(&[1, 8, 7, 7], 1), false);
        let y = tape.value(lim.forward(&ctx, x).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lim_rejects_wrong_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let lim = LimParams::build(&mut b, "lim", 8, SE_REDUCTION).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 4]), false);
        assert!(matches!(lim.forward(&ctx, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn mlp_identity_weights_collapse_to_gelu() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let mlp = MlpParams::build(&mut b, "mlp", 4, 1).unwrap();
        store.set(mlp.fc1.weight, Tensor::eye(4)).unwrap();
        store.set(mlp.fc2.weight, Tensor::eye(4)).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let xt = random_map(&[1, 5, 4], 2);
        let x = tape.leaf(xt.clone(), false);
        let y = tape.value(mlp.forward(&ctx, x).unwrap()).unwrap();
        for (a, &b) in y.data().iter().zip(xt.data()) {
            assert_eq!(*a, crate::kernels::gelu(b));
        }

        store.set(mlp.fc2.weight, Tensor::zeros(&[4, 4])).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(xt, false);
        assert!(tape.value(mlp.forward(&ctx, x).unwrap()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stem_and_embed_stride_arithmetic() {
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut store, 0);
        let stem = Stem::build(&mut b, "stem", 3, 32).unwrap();
        let embed = PatchEmbed::build(&mut b, "embed", 32, 32).unwrap();
        let tape = Tape::shape_only();
        let ctx = Ctx::new(&tape, &store);
        let img = tape.placeholder(&[1, 3, 224, 224], false).unwrap();
        let s = stem.forward(&ctx, img).unwrap();
        assert_eq!(tape.shape(s), vec![1, 32, 112, 112]);
        assert_eq!(tape.shape(embed.forward(&ctx, s).unwrap()), vec![1, 32, 56, 56]);

        let img = tape.placeholder(&[1, 3, 64, 64], false).unwrap();
        assert_eq!(tape.shape(stem.forward(&ctx, img).unwrap()), vec![1, 32, 32, 32]);
        let odd = tape.placeholder(&[1, 3, 63, 64], false).unwrap();
        assert!(matches!(stem.forward(&ctx, odd), Err(Error::Dimension(_))));
        let odd = tape.placeholder(&[1, 32, 7, 7], false).unwrap();
        assert!(matches!(embed.forward(&ctx, odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn stem_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut store, 0);
        let stem = Stem::build(&mut b, "stem", 3, 32).unwrap();
        let convs = 9 * 3 * 16 + 16 + 9 * 16 * 16 + 16 + 9 * 16 * 32 + 32;
        let norms = 2 * (16 + 16 + 32);
        assert_eq!(stem.param_count(), (convs + norms) as u64);
        assert_eq!(store.count_trainable("stem"), stem.param_count());
    }

    #[test]
    fn embed_of_constant_is_constant_per_channel_before_norm() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let embed = PatchEmbed::build(&mut b, "embed", 2, 3).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(Tensor::full(&[1, 2, 6, 6], 0.7), false);
        let y = tape.value(embed.conv.forward(&ctx, x).unwrap()).unwrap();
        // interior positions (away from zero padding) see the same taps
        for c in 0..3 {
            let v = y.at(&[0, c, 1, 1]);
            assert!((y.at(&[0, c, 2, 2]) - v).abs() < 1e-12);
            assert!((y.at(&[0, c, 1, 2]) - v).abs() < 1e-12);
        }
    }
}
