//! Raw numeric kernels over contiguous row-major buffers.
//!
//! Everything here is shape-unchecked; the [`crate::Tape`] validates shapes
//! before dispatching. Loops run in a fixed order so results are bitwise
//! reproducible.

use crate::scalar::Scalar;

#[inline]
fn s<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// `c[m,q] = a[m,p] * b[p,q]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * q];
    for i in 0..m {
        let crow = &mut c[i * q..(i + 1) * q];
        for k in 0..p {
            let av = a[i * p + k];
            let brow = &b[k * q..(k + 1) * q];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `c[m,p] = a[m,q] * b[p,q]^T`
///
/// Transposes `b` once so the inner loop is a contiguous multiply-add; each
/// output still accumulates over `q` in index order.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, q: usize, p: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); q * p];
    for j in 0..p {
        for k in 0..q {
            bt[k * p + j] = b[j * q + k];
        }
    }
    matmul(a, &bt, m, q, p)
}

/// `c[p,q] = a[m,p]^T * b[m,q]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut c = vec![T::zero(); p * q];
    for r in 0..m {
        let arow = &a[r * p..(r + 1) * p];
        let brow = &b[r * q..(r + 1) * q];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * q..(i + 1) * q];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Materializes `data` (of `shape`) with its axes reordered by `perm`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Geometry of a 2-D grouped convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Multiply-accumulates of one forward pass (bias excluded).
    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.oh * self.ow) as u64 * (self.cin_per_group() * self.kh * self.kw) as u64
    }

    /// Output positions `[lo, hi)` whose tap `k` lands inside `0..extent`.
    #[inline]
    fn valid_outputs(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if extent + p > k { ((extent - 1 + p - k) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Cross-correlation (no kernel flip).
///
/// Each output sums its taps in `(ci, ky, kx)` order and adds the bias last.
pub fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (cinpg, coutpg) = (g.cin_per_group(), g.cout_per_group());
    let (plane, s) = (g.oh * g.ow, g.stride);
    let mut y = vec![T::zero(); g.batch * g.c_out * plane];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let grp = co / coutpg;
            let out = &mut y[(n * g.c_out + co) * plane..][..plane];
            for ci in 0..cinpg {
                let xin = &x[(n * g.c_in + grp * cinpg + ci) * g.h * g.w..][..g.h * g.w];
                let wk = &w[(co * cinpg + ci) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_outputs(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (ox_lo, ox_hi) = g.valid_outputs(kx, g.w, g.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - g.padding;
                            let xrow = &xin[iy * g.w..][..g.w];
                            let orow = &mut out[oy * g.ow..][ox_lo..ox_hi];
                            let ix0 = ox_lo * s + kx - g.padding;
                            if s == 1 {
                                for (o, &xv) in orow.iter_mut().zip(&xrow[ix0..]) {
                                    *o = *o + xv * wv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o = *o + xrow[ix0 + j * s] * wv;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                out.iter_mut().for_each(|o| *o = *o + b[co]);
            }
        }
    }
    y
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (cinpg, coutpg) = (g.cin_per_group(), g.cout_per_group());
    let (plane, s) = (g.oh * g.ow, g.stride);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let grp = co / coutpg;
            let gout = &dy[(n * g.c_out + co) * plane..][..plane];
            db[co] = gout.iter().fold(db[co], |a, &v| a + v);
            for ci in 0..cinpg {
                let xoff = (n * g.c_in + grp * cinpg + ci) * g.h * g.w;
                let woff = (co * cinpg + ci) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_outputs(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wi = woff + ky * g.kw + kx;
                        let wv = w[wi];
                        let (ox_lo, ox_hi) = g.valid_outputs(kx, g.w, g.ow);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let row = xoff + (oy * s + ky - g.padding) * g.w + ox_lo * s + kx - g.padding;
                            let grow = &gout[oy * g.ow..][ox_lo..ox_hi];
                            for (j, &gv) in grow.iter().enumerate() {
                                let xi = row + j * s;
                                acc = acc + gv * x[xi];
                                dx[xi] = dx[xi] + gv * wv;
                            }
                        }
                        dw[wi] = dw[wi] + acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Average pooling without padding over an NCHW buffer.
pub fn avg_pool2d<T: Scalar>(x: &[T], planes: usize, (h, w): (usize, usize), k: usize, stride: usize) -> (Vec<T>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = s::<T>(1.0 / (k * k) as f64);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        acc = acc + x[(p * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                y[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    (y, oh, ow)
}

pub fn avg_pool2d_backward<T: Scalar>(dy: &[T], planes: usize, (h, w): (usize, usize), k: usize, stride: usize) -> Vec<T> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = s::<T>(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let gy = dy[(p * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (p * h + oy * stride + ky) * w + ox * stride + kx;
                        dx[i] = dx[i] + gy;
                    }
                }
            }
        }
    }
    dx
}

/// Softmax along the middle axis of an (outer, len, inner) view.
pub fn softmax<T: Scalar>(x: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / sum;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot = dot + y[at(j)] * dy[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each contiguous row of length `c`, then applies the affine.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], c: usize, eps: f64) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / c;
    let inv_c = s::<T>(1.0 / c as f64);
    let eps = s::<T>(eps);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let xh = (row[j] - mean) * rs;
            xhat[r * c + j] = xh;
            y[r * c + j] = xh * gain[j] + bias[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(dy: &[T], gain: &[T], cache: &NormCache<T>, c: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / c;
    let inv_c = s::<T>(1.0 / c as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for r in 0..rows {
        let base = r * c;
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..c {
            let g = dy[base + j];
            let xh = cache.xhat[base + j];
            dg[j] = dg[j] + g * xh;
            db[j] = db[j] + g;
            let dxh = g * gain[j];
            mean_d = mean_d + dxh;
            mean_dx = mean_dx + dxh * xh;
        }
        mean_d = mean_d * inv_c;
        mean_dx = mean_dx * inv_c;
        let rs = cache.rstd[r];
        for j in 0..c {
            let dxh = dy[base + j] * gain[j];
            dx[base + j] = rs * (dxh - mean_d - cache.xhat[base + j] * mean_dx);
        }
    }
    (dx, dg, db)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.to_f64().unwrap();
    s(0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.to_f64().unwrap();
    let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
    s(cdf + v * pdf)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
