//! Straight-line reference implementations over plain `Vec<f64>`.
//!
//! Nothing here calls library kernels; weights are read from a parameter
//! store by name. Feature maps are single images in `[C, H, W]` order and
//! token matrices are `[N, C]` row-major.

#![allow(dead_code)]

use s2a_core::ssa::SrMode;
use s2a_core::{ParamStore, RngStream};

pub const EPS: f64 = 1e-5;

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let id = store.id_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    store.get(id).data().to_vec()
}

pub fn has(store: &ParamStore<f64>, name: &str) -> bool {
    store.id_of(name).is_some()
}

/// `a[m x p] * b[p x q]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        for j in 0..q {
            let mut acc = 0.0;
            for t in 0..p {
                acc += a[i * p + t] * b[t * q + j];
            }
            out[i * q + j] = acc;
        }
    }
    out
}

/// `y[n][o] = sum_i x[n][i] w[o][i] + b[o]`
pub fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for r in 0..n {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[r * din + i] * w[o * din + i];
            }
            y[r * dout + o] = acc;
        }
    }
    y
}

pub fn linear_named(store: &ParamStore<f64>, path: &str, x: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let w = param(store, &format!("{path}.weight"));
    let b = if has(store, &format!("{path}.bias")) { param(store, &format!("{path}.bias")) } else { vec![0.0; dout] };
    linear(x, n, din, &w, &b, dout)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }
}

/// Direct six-loop grouped convolution of one `[C_in, H, W]` image.
pub fn conv2d(x: &[f64], s: ConvShape, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = s.out_hw();
    let cin_g = s.c_in / s.groups;
    let cout_g = s.c_out / s.groups;
    let mut y = vec![0.0; s.c_out * oh * ow];
    for co in 0..s.c_out {
        let g = co / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..cin_g {
                    for ky in 0..s.k {
                        for kx in 0..s.k {
                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            let xv = x[((g * cin_g + ci) * s.h + iy as usize) * s.w + ix as usize];
                            let wv = weight[((co * cin_g + ci) * s.k + ky) * s.k + kx];
                            acc += xv * wv;
                        }
                    }
                }
                y[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

pub fn conv_named(store: &ParamStore<f64>, path: &str, x: &[f64], s: ConvShape) -> Vec<f64> {
    let w = param(store, &format!("{path}.weight"));
    let b = has(store, &format!("{path}.bias")).then(|| param(store, &format!("{path}.bias")));
    conv2d(x, s, &w, b.as_deref())
}

/// Layer norm of each length-`c` row.
pub fn layer_norm(x: &[f64], c: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(c).zip(y.chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        for i in 0..c {
            out[i] = (row[i] - mean) * inv * g[i] + b[i];
        }
    }
    y
}

pub fn layer_norm_named(store: &ParamStore<f64>, path: &str, x: &[f64], c: usize) -> Vec<f64> {
    layer_norm(x, c, &param(store, &format!("{path}.weight")), &param(store, &format!("{path}.bias")))
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `[C, H, W] -> [H*W, C]`
pub fn to_tokens(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for ch in 0..c {
        for p in 0..hw {
            t[p * c + ch] = x[ch * hw + p];
        }
    }
    t
}

/// `[H*W, C] -> [C, H, W]`
pub fn to_map(t: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut x = vec![0.0; t.len()];
    for ch in 0..c {
        for p in 0..hw {
            x[ch * hw + p] = t[p * c + ch];
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    None,
    Conv,
    Pool,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnCfg {
    pub d: usize,
    pub heads: usize,
    pub k: usize,
    pub reduce: Reduce,
    pub sr_norm: bool,
    /// Query/key width per head is 1 (strip) or `d / heads` (full).
    pub squeeze: bool,
}

/// Multi-head attention over `x[N x d]` laid out on an `h x w` map,
/// one head at a time.
pub fn attention(store: &ParamStore<f64>, path: &str, x: &[f64], (h, w): (usize, usize), cfg: AttnCfg) -> Vec<f64> {
    let n = h * w;
    let d = cfg.d;
    let qk = if cfg.squeeze { cfg.heads } else { d };
    let per_head_qk = qk / cfg.heads;
    let dh = d / cfg.heads;

    let q = linear_named(store, &format!("{path}.q"), x, n, d, qk);

    let (reduced, ns) = match cfg.reduce {
        Reduce::None => (x.to_vec(), n),
        Reduce::Conv | Reduce::Pool => {
            let map = to_map(x, d, n);
            let s = ConvShape { c_in: d, h, w, c_out: d, k: cfg.k, stride: cfg.k, pad: 0, groups: d };
            let y = if cfg.reduce == Reduce::Conv {
                conv_named(store, &format!("{path}.sr"), &map, s)
            } else {
                let avg = vec![1.0 / (cfg.k * cfg.k) as f64; d * cfg.k * cfg.k];
                conv2d(&map, s, &avg, None)
            };
            let (oh, ow) = s.out_hw();
            let mut t = to_tokens(&y, d, oh * ow);
            if cfg.sr_norm {
                t = layer_norm_named(store, &format!("{path}.sr_norm"), &t, d);
            }
            (t, oh * ow)
        }
    };
    let kk = linear_named(store, &format!("{path}.k"), &reduced, ns, d, qk);
    let v = linear_named(store, &format!("{path}.v"), &reduced, ns, d, d);

    let scale = 1.0 / (per_head_qk as f64).sqrt();
    let mut heads_out = vec![0.0; n * d];
    for head in 0..cfg.heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..ns)
                .map(|j| {
                    let mut s = 0.0;
                    for t in 0..per_head_qk {
                        let c = head * per_head_qk + t;
                        s += q[i * qk + c] * kk[j * qk + c];
                    }
                    s * scale
                })
                .collect();
            let a = softmax_row(&scores);
            for c in 0..dh {
                let col = head * dh + c;
                heads_out[i * d + col] = (0..ns).map(|j| a[j] * v[j * d + col]).sum();
            }
        }
    }
    linear_named(store, &format!("{path}.proj"), &heads_out, n, d, d)
}

/// Local interaction branch on one `[C, H, W]` map.
pub fn lim(store: &ParamStore<f64>, path: &str, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = ConvShape { c_in: c, h, w, c_out: c, k: 1, stride: 1, pad: 0, groups: 1 };
    let dw = ConvShape { k: 3, pad: 1, groups: c, ..pw };
    let a: Vec<f64> = conv_named(store, &format!("{path}.pw1"), x, pw).into_iter().map(relu).collect();
    let b = conv_named(store, &format!("{path}.dw"), &a, dw);

    let hw = h * w;
    let pooled: Vec<f64> = (0..c).map(|ch| b[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let hidden_w = param(store, &format!("{path}.se.reduce.weight"));
    let hidden = hidden_w.len() / c;
    let z: Vec<f64> = linear_named(store, &format!("{path}.se.reduce"), &pooled, 1, c, hidden).into_iter().map(relu).collect();
    let gates: Vec<f64> = linear_named(store, &format!("{path}.se.expand"), &z, 1, hidden, c).into_iter().map(sigmoid).collect();
    let gated: Vec<f64> = (0..c * hw).map(|i| relu(b[i] * gates[i / hw])).collect();
    conv_named(store, &format!("{path}.pw2"), &gated, pw)
}

pub fn mlp(store: &ParamStore<f64>, path: &str, t: &[f64], n: usize, c: usize, ratio: usize) -> Vec<f64> {
    let hid: Vec<f64> = linear_named(store, &format!("{path}.fc1"), t, n, c, c * ratio).into_iter().map(gelu).collect();
    linear_named(store, &format!("{path}.fc2"), &hid, n, c * ratio, c)
}

#[derive(Debug, Clone, Copy)]
pub struct BlockCfg {
    pub c: usize,
    pub heads: usize,
    pub k: usize,
    pub mlp_ratio: usize,
    pub lim: bool,
    pub reduce: Reduce,
    pub sr_norm: bool,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Hybrid block on one `[C, H, W]` map, residual by residual.
pub fn hpb(store: &ParamStore<f64>, path: &str, x: &[f64], h: usize, w: usize, cfg: BlockCfg) -> Vec<f64> {
    let c = cfg.c;
    let n = h * w;
    let dw = ConvShape { c_in: c, h, w, c_out: c, k: 3, stride: 1, pad: 1, groups: c };
    let f_conv = add(&conv_named(store, &format!("{path}.dw"), x, dw), x);
    let t_conv = to_tokens(&f_conv, c, n);

    let attn_cfg = AttnCfg {
        d: c,
        heads: cfg.heads,
        k: cfg.k,
        reduce: if cfg.k > 1 { cfg.reduce } else { Reduce::None },
        sr_norm: cfg.sr_norm,
        squeeze: true,
    };
    let normed = layer_norm_named(store, &format!("{path}.norm1"), &t_conv, c);
    let f_ssa = add(&attention(store, &format!("{path}.ssa"), &normed, (h, w), attn_cfg), &t_conv);

    let f_lim = if cfg.lim {
        let n2 = to_map(&layer_norm_named(store, &format!("{path}.norm2"), &f_ssa, c), c, n);
        let local = to_tokens(&lim(store, &format!("{path}.lim"), &n2, c, h, w), c, n);
        add(&local, &f_ssa)
    } else {
        f_ssa
    };
    let n3 = layer_norm_named(store, &format!("{path}.norm3"), &f_lim, c);
    let out = add(&mlp(store, &format!("{path}.mlp"), &n3, n, c, cfg.mlp_ratio), &f_lim);
    to_map(&out, c, n)
}

/// A random legal strip-attention configuration with `N <= 64`, `d <= 32`.
pub fn random_attention_case(rng: &mut RngStream) -> ((usize, usize), usize, usize, usize, SrMode, bool) {
    let k = [1, 2, 4][rng.below(3)];
    let d = [4, 8, 12, 16, 24, 32][rng.below(6)];
    let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0 && *h <= 8).collect();
    let heads = divisors[rng.below(divisors.len())];
    let max_side = 64 / k / k;
    let (hm, wm) = loop {
        let hm = 1 + rng.below(max_side.min(8));
        let wm = 1 + rng.below(max_side.min(8));
        if hm * wm * k * k <= 64 {
            break (hm, wm);
        }
    };
    let mode = if rng.below(2) == 0 { SrMode::Conv } else { SrMode::Pool };
    ((hm * k, wm * k), d, heads, k, mode, rng.below(2) == 0)
}
