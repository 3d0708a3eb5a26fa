mod oracle;

use oracle::{AttnCfg, BlockCfg, ConvShape, Reduce};
use proptest::prelude::*;
use s2a_core::backbone::{HpbParams, StageConfig, VariantConfig};
use s2a_core::local::{LimParams, MlpParams};
use s2a_core::ssa::{generalized_attention, reference_mhsa, strip_attention, AttentionSpec, MhsaParams, SrMode, SsaConfig, SsaParams};
use s2a_core::{Builder, Ctx, ParamStore, RngStream, Tape, Tensor};

fn random_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs `f` on an inference tape and returns the output values.
fn eval(store: &ParamStore<f64>, x: Tensor<f64>, f: impl FnOnce(&Ctx<'_, f64>, s2a_core::Var) -> s2a_core::Var) -> Vec<f64> {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store);
    let xv = tape.leaf(x, false);
    let y = f(&ctx, xv);
    tape.value(y).unwrap().data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..12, p in 1usize..12, q in 1usize..12, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let a = random_vec(&mut rng, m * p);
        let b = random_vec(&mut rng, p * q);
        let tape = Tape::<f64>::inference();
        let av = tape.leaf(Tensor::new(&[m, p], a.clone()).unwrap(), false);
        let bv = tape.leaf(Tensor::new(&[p, q], b.clone()).unwrap(), false);
        let y = tape.matmul(av, bv).unwrap();
        let got = tape.value(y).unwrap().data().to_vec();
        prop_assert!(max_diff(&got, &oracle::matmul(&a, &b, m, p, q)) < 1e-12);
    }

    #[test]
    fn conv_matches_six_loops(
        groups in prop::sample::select(vec![1usize, 2, 4]),
        cin_g in 1usize..3,
        cout_g in 1usize..3,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
        h in 3usize..8,
        w in 3usize..8,
        seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let s = ConvShape { c_in: cin_g * groups, h, w, c_out: cout_g * groups, k, stride, pad, groups };
        let mut rng = RngStream::new(seed, 0);
        let x = random_vec(&mut rng, s.c_in * h * w);
        let wt = random_vec(&mut rng, s.c_out * cin_g * k * k);
        let b = random_vec(&mut rng, s.c_out);
        let tape = Tape::<f64>::inference();
        let xv = tape.leaf(Tensor::new(&[1, s.c_in, h, w], x.clone()).unwrap(), false);
        let wv = tape.leaf(Tensor::new(&[s.c_out, cin_g, k, k], wt.clone()).unwrap(), false);
        let bv = tape.leaf(Tensor::new(&[s.c_out], b.clone()).unwrap(), false);
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad, groups).unwrap();
        let got = tape.value(y).unwrap().data().to_vec();
        prop_assert!(max_diff(&got, &oracle::conv2d(&x, s, &wt, Some(&b))) < 1e-12);
    }
}

#[test]
fn strip_attention_matches_per_head_loops() {
    let mut rng = RngStream::new(2024, 0);
    for case in 0..64 {
        let (hw, d, heads, k, mode, sr_norm) = oracle::random_attention_case(&mut rng);
        let mut store = ParamStore::<f64>::new();
        let cfg = SsaConfig { sr_mode: mode, sr_norm, ..SsaConfig::new(d, heads, k) };
        let p = SsaParams::build(&mut Builder::new(&mut store, case), "ssa", &cfg).unwrap();
        store.randomize(&mut RngStream::new(case, 7), 0.5);
        let n = hw.0 * hw.1;
        let x = random_vec(&mut rng, n * d);
        let got = eval(&store, Tensor::new(&[n, d], x.clone()).unwrap(), |ctx, xv| strip_attention(ctx, xv, hw, &p).unwrap().out);
        let reduce = match (k, mode) {
            (1, _) => Reduce::None,
            (_, SrMode::Conv) => Reduce::Conv,
            (_, SrMode::Pool) => Reduce::Pool,
        };
        let want = oracle::attention(&store, "ssa", &x, hw, AttnCfg { d, heads, k, reduce, sr_norm, squeeze: true });
        let diff = max_diff(&got, &want);
        assert!(diff < 1e-10, "case {case} {hw:?} d={d} h={heads} k={k} {mode:?}: {diff}");
    }
}

#[test]
fn reference_mhsa_matches_loops_and_generalized_path() {
    let mut rng = RngStream::new(77, 0);
    for (n, d, heads) in [(1, 4, 1), (7, 8, 2), (16, 16, 4), (49, 32, 8)] {
        let mut store = ParamStore::<f64>::new();
        let p = MhsaParams::build(&mut Builder::new(&mut store, 3), "mhsa", d, heads).unwrap();
        store.randomize(&mut RngStream::new(n as u64, 7), 0.5);
        let x = random_vec(&mut rng, n * d);
        let xt = Tensor::new(&[n, d], x.clone()).unwrap();
        let reference = eval(&store, xt.clone(), |ctx, xv| reference_mhsa(ctx, xv, &p).unwrap().out);
        let want =
            oracle::attention(&store, "mhsa", &x, (n, 1), AttnCfg { d, heads, k: 1, reduce: Reduce::None, sr_norm: false, squeeze: false });
        assert!(max_diff(&reference, &want) < 1e-10);

        let general = eval(&store, xt, |ctx, xv| generalized_attention(ctx, xv, (1, n), &AttentionSpec::full(&p)).unwrap().out);
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&general), bits(&reference));
    }
}

#[test]
fn lim_and_mlp_match_straight_line() {
    let mut rng = RngStream::new(5, 0);
    for (c, h, w) in [(4, 3, 5), (8, 4, 4), (16, 2, 6)] {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 1);
        let lim = LimParams::build(&mut b, "lim", c, 4).unwrap();
        let mlp = MlpParams::build(&mut b, "mlp", c, 4).unwrap();
        store.randomize(&mut RngStream::new(c as u64, 7), 0.5);
        let x = random_vec(&mut rng, c * h * w);
        let got = eval(&store, Tensor::new(&[1, c, h, w], x.clone()).unwrap(), |ctx, xv| lim.forward(ctx, xv).unwrap());
        assert!(max_diff(&got, &oracle::lim(&store, "lim", &x, c, h, w)) < 1e-10);

        let n = h * w;
        let got = eval(&store, Tensor::new(&[n, c], x.clone()).unwrap(), |ctx, xv| mlp.forward(ctx, xv).unwrap());
        assert!(max_diff(&got, &oracle::mlp(&store, "mlp", &x, n, c, 4)) < 1e-10);
    }
}

#[test]
fn hpb_matches_residual_transcription() {
    let mut rng = RngStream::new(11, 0);
    let cases = [
        (8, 2, 2, true, SrMode::Conv, true, (4, 4)),
        (8, 4, 1, true, SrMode::Conv, true, (3, 5)),
        (12, 3, 2, false, SrMode::Pool, false, (4, 6)),
        (16, 2, 4, true, SrMode::Pool, true, (8, 4)),
    ];
    for (i, &(c, heads, k, lim, mode, sr_norm, (h, w))) in cases.iter().enumerate() {
        let stage = StageConfig { channels: c, blocks: 1, sr_ratio: k, heads, mlp_ratio: 2 };
        let mut cfg = VariantConfig::toy([1, 1, 1, 1], 2);
        cfg.lim_enabled = lim;
        cfg.sr_mode = mode;
        cfg.sr_norm = sr_norm;
        let mut store = ParamStore::<f64>::new();
        let p = HpbParams::build(&mut Builder::new(&mut store, i as u64), "blk", &stage, &cfg).unwrap();
        store.randomize(&mut RngStream::new(i as u64, 7), 0.4);
        let x = random_vec(&mut rng, c * h * w);
        let got = eval(&store, Tensor::new(&[1, c, h, w], x.clone()).unwrap(), |ctx, xv| p.forward(ctx, xv).unwrap());
        let reduce = if mode == SrMode::Conv { Reduce::Conv } else { Reduce::Pool };
        let bc = BlockCfg { c, heads, k, mlp_ratio: 2, lim, reduce, sr_norm };
        let diff = max_diff(&got, &oracle::hpb(&store, "blk", &x, h, w, bc));
        assert!(diff < 1e-10, "case {i}: {diff}");
    }
}
