//! Forward and backward kernels on raw row-major buffers.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

pub(crate) fn concat<T: Copy>(
    sa: &[usize],
    a: &[T],
    sb: &[usize],
    b: &[T],
    axis: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    let compatible = sa.len() == sb.len()
        && axis < sa.len()
        && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
    if !compatible {
        return Err(Error::ShapeMismatch { op: "concat", left: sa.to_vec(), right: sb.to_vec() });
    }
    let outer: usize = sa[..axis].iter().product();
    let inner: usize = sa[axis + 1..].iter().product();
    let (la, lb) = (sa[axis] * inner, sb[axis] * inner);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        out.extend_from_slice(&a[o * la..(o + 1) * la]);
        out.extend_from_slice(&b[o * lb..(o + 1) * lb]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Ok((shape, out))
}

/// Splits a gradient of a concatenation back into its two inputs.
pub(crate) fn split_rows<T: Copy>(g: &[T], outer: usize, la: usize, lb: usize) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(outer * la);
    let mut gb = Vec::with_capacity(outer * lb);
    for o in 0..outer {
        let row = &g[o * (la + lb)..(o + 1) * (la + lb)];
        ga.extend_from_slice(&row[..la]);
        gb.extend_from_slice(&row[la..]);
    }
    (ga, gb)
}

pub(crate) fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), MatRef::row_major(a, m, k), MatRef::row_major(b, k, n), T::zero(), &mut out);
    out
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape { op: "axis", msg: format!("axis {} out of range for {:?}", axis, shape) });
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

pub(crate) fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Result<Vec<T>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
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
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    Ok(y)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

/// `y = x * w^T + b` for `x: [batch, n_in]`, `w: [n_out, n_in]`.
pub(crate) fn linear<T: Scalar>(x: &[T], batch: usize, n_in: usize, w: &[T], b: &[T], n_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    gemm(T::one(), MatRef::row_major(x, batch, n_in), MatRef::transposed(w, n_out, n_in), T::one(), &mut y);
    y
}

pub(crate) struct LinearGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    n_in: usize,
    w: &[T],
    n_out: usize,
    g: &[T],
    need: [bool; 3],
) -> LinearGrads<T> {
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); batch * n_in];
        gemm(T::one(), MatRef::row_major(g, batch, n_out), MatRef::row_major(w, n_out, n_in), T::zero(), &mut dx);
        dx
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); n_out * n_in];
        gemm(T::one(), MatRef::transposed(g, batch, n_out), MatRef::row_major(x, batch, n_in), T::zero(), &mut dw);
        dw
    });
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); n_out];
        for row in g.chunks_exact(n_out) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += *v;
            }
        }
        db
    });
    LinearGrads { dx, dw, db }
}

/// Geometry of a valid, stride-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn oh(&self) -> usize {
        self.h - self.k + 1
    }
    pub fn ow(&self) -> usize {
        self.w - self.k + 1
    }
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn out_pixels(&self) -> usize {
        self.oh() * self.ow()
    }
}

/// Unfolds one sample into `[c_in * k * k, oh * ow]` columns.
fn im2col<T: Copy>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let (oh, ow, n) = (d.oh(), d.ow(), d.out_pixels());
    for c in 0..d.c_in {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let src = c * d.h * d.w + (oy + ky) * d.w + kx;
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let (oh, ow, n) = (d.oh(), d.ow(), d.out_pixels());
    for c in 0..d.c_in {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let base = c * d.h * d.w + (oy + ky) * d.w + kx;
                    for (t, s) in dx[base..base + ow].iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *t += *s;
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation: `x: [b, c_in, h, w]`, `w: [c_out, c_in, k, k]`.
pub(crate) fn conv2d<T: Scalar>(x: &[T], weight: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let (kk, n) = (d.patch_len(), d.out_pixels());
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * n;
    let mut out = vec![T::zero(); d.batch * out_len];
    let mut cols = vec![T::zero(); kk * n];
    for b in 0..d.batch {
        im2col(&x[b * in_len..(b + 1) * in_len], d, &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (o, chunk) in dst.chunks_exact_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(T::one(), MatRef::row_major(weight, d.c_out, kk), MatRef::row_major(&cols, kk, n), T::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    g: &[T],
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (kk, n) = (d.patch_len(), d.out_pixels());
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * n;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut db = need[2].then(|| vec![T::zero(); d.c_out]);
    let mut cols = vec![T::zero(); kk * n];
    for b in 0..d.batch {
        let gb = &g[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (o, row) in gb.chunks_exact(n).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], d, &mut cols);
            gemm(T::one(), MatRef::row_major(gb, d.c_out, n), MatRef::transposed(&cols, kk, n), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), MatRef::transposed(weight, d.c_out, kk), MatRef::row_major(gb, d.c_out, n), T::zero(), &mut cols);
            col2im_add(&cols, d, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel normalization result shared by both batch-norm modes.
pub(crate) struct NormForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch-norm layout helper: `x` viewed as `[batch, channels, spatial]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormDims {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl NormDims {
    fn for_each_channel<T>(&self, c: usize, x: &[T], mut f: impl FnMut(usize, &T)) {
        for b in 0..self.batch {
            let base = (b * self.channels + c) * self.spatial;
            for (i, v) in x[base..base + self.spatial].iter().enumerate() {
                f(base + i, v);
            }
        }
    }
}

/// Normalizes with the given statistics, or with batch statistics when `stats` is `None`.
pub(crate) fn batchnorm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: &NormDims,
    eps: f64,
    stats: Option<(&[T], &[T])>,
) -> NormForward<T> {
    let count = (d.batch * d.spatial) as f64;
    let mut mean = vec![T::zero(); d.channels];
    let mut var = vec![T::zero(); d.channels];
    for c in 0..d.channels {
        match stats {
            Some((m, v)) => {
                mean[c] = m[c];
                var[c] = v[c];
            }
            None => {
                let mut s = 0.0;
                d.for_each_channel(c, x, |_, v| s += v.as_f64());
                let mu = s / count;
                let mut ss = 0.0;
                d.for_each_channel(c, x, |_, v| {
                    let t = v.as_f64() - mu;
                    ss += t * t;
                });
                mean[c] = T::of(mu);
                var[c] = T::of(ss / count);
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + T::of(eps)).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for c in 0..d.channels {
        d.for_each_channel(c, x, |i, v| {
            let h = (*v - mean[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = h * gamma[c] + beta[c];
        });
    }
    NormForward { y, xhat, inv_std, mean, var }
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    d: &NormDims,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::of((d.batch * d.spatial) as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); d.channels];
    let mut dbeta = vec![T::zero(); d.channels];
    for c in 0..d.channels {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        d.for_each_channel(c, g, |i, v| {
            sg += *v;
            sgx += *v * xhat[i];
        });
        dgamma[c] = sgx;
        dbeta[c] = sg;
        let scale = gamma[c] * inv_std[c];
        if batch_stats {
            d.for_each_channel(c, g, |i, v| {
                dx[i] = scale / count * (count * *v - sg - xhat[i] * sgx);
            });
        } else {
            d.for_each_channel(c, g, |i, v| dx[i] = scale * *v);
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let d = ConvDims { batch: 2, c_in: 2, h: 5, w: 6, c_out: 3, k: 3 };
        let x: Vec<f64> = (0..2 * 2 * 5 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
        let bias = vec![0.5, -1.0, 2.0];
        let out = conv2d(&x, &w, &bias, &d);
        for b in 0..2 {
            for o in 0..3 {
                for oy in 0..d.oh() {
                    for ox in 0..d.ow() {
                        let mut s = bias[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    s += x[((b * 2 + c) * 5 + oy + ky) * 6 + ox + kx] * w[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out[((b * 3 + o) * d.oh() + oy) * d.ow() + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let y = softmax(&[1000.0f32, 0.0], 1, 2, 1).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-6 && y[1] >= 0.0 && y[1] < 1e-6);
        assert!(softmax(&[f32::NAN, 0.0], 1, 2, 1).is_err());
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let d = NormDims { batch: 4, channels: 2, spatial: 3 };
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 1.7).sin() * 3.0 + i as f64).collect();
        let f = batchnorm(&x, &[1.0, 1.0], &[0.0, 0.0], &d, 1e-5, None);
        for c in 0..2 {
            let mut vals = Vec::new();
            d.for_each_channel(c, &f.y, |_, v| vals.push(*v));
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
