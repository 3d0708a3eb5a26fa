//! Single-threaded latency measurements of the two token mixers.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cost::{count_mhsa_macs, count_ssa_macs};
use crate::error::{dim_err, Error, Result};
use crate::params::{Builder, Ctx, ParamStore};
use crate::rng::{RngStream, DATA_STREAM};
use crate::ssa::{reference_mhsa, strip_attention, MhsaParams, SrMode, SsaConfig, SsaParams};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "mixer,n,dim,heads,sr,iters,mean_us,p50_us,p95_us,macs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixer {
    Ssa,
    Mhsa,
}

impl Mixer {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ssa => "ssa",
            Self::Mhsa => "mhsa",
        }
    }
}

impl FromStr for Mixer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssa" => Ok(Self::Ssa),
            "mhsa" => Ok(Self::Mhsa),
            _ => Err(Error::Config(format!("unknown mixer {s:?}; expected ssa or mhsa"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSpec {
    pub mixer: Mixer,
    pub n: usize,
    pub dim: usize,
    pub heads: usize,
    /// Ignored by `mhsa`.
    pub sr: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mixer: Mixer,
    pub n: usize,
    pub dim: usize,
    pub heads: usize,
    pub sr: usize,
    pub iters: usize,
    pub warmup: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub macs: u64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3},{:.3},{}",
            self.mixer.as_str(),
            self.n,
            self.dim,
            self.heads,
            self.sr,
            self.iters,
            self.mean_us,
            self.p50_us,
            self.p95_us,
            self.macs
        )
    }
}

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(p/100 * len)` (1-based).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Square map when `n` is a square with side divisible by `k`, else `k x n/k`.
pub fn token_grid(n: usize, k: usize) -> Result<(usize, usize)> {
    if n == 0 || k == 0 {
        return Err(dim_err!("n and sr must be positive, got {n}, {k}"));
    }
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n && side % k == 0 {
        return Ok((side, side));
    }
    if n % (k * k) == 0 {
        return Ok((k, n / k));
    }
    Err(dim_err!("{n} tokens cannot be reduced by sr {k}"))
}

type ForwardPass = Box<dyn FnMut(&ParamStore<f32>) -> Result<()>>;

/// Times `iters` forward passes of one image after `warmup` untimed passes.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchRecord> {
    if spec.iters == 0 {
        return Err(Error::Parameter("iters must be at least 1".into()));
    }
    if spec.heads == 0 || spec.dim % spec.heads != 0 {
        return Err(dim_err!("dim {} does not split into {} heads", spec.dim, spec.heads));
    }
    let mut rng = RngStream::new(spec.seed, DATA_STREAM);
    let x = Tensor::<f32>::new(&[spec.n, spec.dim], (0..spec.n * spec.dim).map(|_| rng.normal() as f32).collect())?;
    let mut store = ParamStore::<f32>::new();
    let mut b = Builder::new(&mut store, spec.seed);

    let (sr, macs, mut step): (usize, u64, ForwardPass) = match spec.mixer {
        Mixer::Ssa => {
            let hw = token_grid(spec.n, spec.sr)?;
            let p = SsaParams::build(&mut b, "ssa", &SsaConfig::new(spec.dim, spec.heads, spec.sr))?;
            let macs = count_ssa_macs(hw, spec.dim, spec.heads, spec.sr, SrMode::Conv)?;
            let x = x.clone();
            let step = move |s: &ParamStore<f32>| {
                let tape = Tape::inference();
                let ctx = Ctx::new(&tape, s);
                let xv = tape.leaf(x.clone(), false);
                strip_attention(&ctx, xv, hw, &p).map(|_| ())
            };
            (spec.sr, macs, Box::new(step))
        }
        Mixer::Mhsa => {
            let p = MhsaParams::build(&mut b, "mhsa", spec.dim, spec.heads)?;
            let macs = count_mhsa_macs(spec.n, spec.dim, spec.heads)?;
            let x = x.clone();
            let step = move |s: &ParamStore<f32>| {
                let tape = Tape::inference();
                let ctx = Ctx::new(&tape, s);
                let xv = tape.leaf(x.clone(), false);
                reference_mhsa(&ctx, xv, &p).map(|_| ())
            };
            (1, macs, Box::new(step))
        }
    };
    for _ in 0..spec.warmup {
        step(&store)?;
    }
    let mut samples = Vec::with_capacity(spec.iters);
    for _ in 0..spec.iters {
        let t0 = Instant::now();
        step(&store)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let mean_us = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.sort_by(f64::total_cmp);
    Ok(BenchRecord {
        mixer: spec.mixer,
        n: spec.n,
        dim: spec.dim,
        heads: spec.heads,
        sr,
        iters: spec.iters,
        warmup: spec.warmup,
        mean_us,
        p50_us: nearest_rank(&samples, 50.0),
        p95_us: nearest_rank(&samples, 95.0),
        macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 50.0), 10.0);
        assert_eq!(nearest_rank(&v, 95.0), 19.0);
        assert_eq!(nearest_rank(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn token_grids() {
        assert_eq!(token_grid(3136, 8).unwrap(), (56, 56));
        assert_eq!(token_grid(32, 2).unwrap(), (2, 16));
        assert!(token_grid(30, 4).is_err());
    }

    #[test]
    fn single_iteration_statistics_coincide() {
        let spec = BenchSpec { mixer: Mixer::Ssa, n: 64, dim: 16, heads: 2, sr: 2, iters: 1, warmup: 0, seed: 0 };
        let r = run_bench(&spec).unwrap();
        assert!(r.p50_us == r.p95_us && r.p50_us == r.mean_us);
    }
}
