//! Fixtures shared by the criterion benches.

use s2a_core::ssa::{reference_mhsa, strip_attention, MhsaParams, SsaConfig, SsaParams};
use s2a_core::{Builder, Ctx, ParamStore, Result, RngStream, Tape, Tensor};

/// Stage-like mixer shapes: `(side, dim, heads, sr)` with `N = side^2`.
pub const STAGE_SHAPES: [(usize, usize, usize, usize); 4] = [(56, 48, 1, 8), (28, 64, 2, 4), (14, 128, 4, 2), (7, 256, 8, 1)];

enum Mixer {
    Strip(Box<SsaParams>, (usize, usize)),
    Full(Box<MhsaParams>),
}

/// One token mixer with seeded weights and a fixed `[N, d]` input.
pub struct MixerFixture {
    store: ParamStore<f32>,
    input: Tensor<f32>,
    mixer: Mixer,
}

fn tokens(n: usize, dim: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = RngStream::new(seed, 3);
    Tensor::new(&[n, dim], (0..n * dim).map(|_| rng.normal() as f32).collect())
}

impl MixerFixture {
    pub fn strip(side: usize, dim: usize, heads: usize, sr: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let p = SsaParams::build(&mut Builder::new(&mut store, seed), "ssa", &SsaConfig::new(dim, heads, sr))?;
        Ok(Self { store, input: tokens(side * side, dim, seed)?, mixer: Mixer::Strip(Box::new(p), (side, side)) })
    }

    pub fn full(side: usize, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let p = MhsaParams::build(&mut Builder::new(&mut store, seed), "mhsa", dim, heads)?;
        Ok(Self { store, input: tokens(side * side, dim, seed)?, mixer: Mixer::Full(Box::new(p)) })
    }

    /// One inference forward pass.
    pub fn run(&self) -> Result<Tensor<f32>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store);
        let x = tape.leaf(self.input.clone(), false);
        let out = match &self.mixer {
            Mixer::Strip(p, hw) => strip_attention(&ctx, x, *hw, p)?,
            Mixer::Full(p) => reference_mhsa(&ctx, x, p)?,
        };
        Ok((*tape.value(out.out)?).clone())
    }
}
