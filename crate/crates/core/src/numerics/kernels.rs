//! Slice-level forward and backward kernels used by the graph.

use crate::numerics::{gemm, MatMut, MatRef, Scalar};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output extent of one spatial axis, `None` when it would be < 1.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution, `x: [n, c_in, h, w]`, `weight: [c_out, c_in, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let mut out = vec![T::zero(); n * out_len];
    for b in 0..n {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        gemm(
            MatRef::row_major(weight, g.c_out, g.col_rows()),
            MatRef::row_major(&col, g.col_rows(), g.col_cols()),
            T::zero(),
            MatMut::row_major(&mut out[b * out_len..(b + 1) * out_len], g.c_out, g.col_cols()),
        );
    }
    out
}

/// Returns `(d_input, d_weight)`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    n: usize,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Vec<T>, Vec<T>) {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let mut dcol = vec![T::zero(); g.col_rows() * g.col_cols()];
    let mut dx = if need_input { vec![T::zero(); n * in_len] } else { Vec::new() };
    let mut dw = vec![T::zero(); if need_weight { weight.len() } else { 0 }];
    for b in 0..n {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        if need_weight {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
            gemm(
                MatRef::row_major(go, g.c_out, g.col_cols()),
                MatRef::row_major(&col, g.col_rows(), g.col_cols()).t(),
                T::one(),
                MatMut::row_major(&mut dw, g.c_out, g.col_rows()),
            );
        }
        if need_input {
            gemm(
                MatRef::row_major(weight, g.c_out, g.col_rows()).t(),
                MatRef::row_major(go, g.c_out, g.col_cols()),
                T::zero(),
                MatMut::row_major(&mut dcol, g.col_rows(), g.col_cols()),
            );
            col2im_add(&dcol, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

pub fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(width) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], gy: &[T], width: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((yr, gr), out) in y.chunks(width).zip(gy.chunks(width)).zip(gx.chunks_mut(width)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

/// Standard normal CDF.
pub fn phi<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu<T: Scalar>(x: T) -> T {
    x * phi(x)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    phi(x) + x * pdf
}

/// Row-wise layer norm; returns `(output, mean, rstd)` per row.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let inv_d = T::one() / T::from_usize_lossy(d);
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let inv_d = T::one() / T::from_usize_lossy(d);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    for (r, ((xr, gr), dr)) in x.chunks(d).zip(gy.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = gr[i] * gamma[i];
            sum_dxhat = sum_dxhat + dxhat[i];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[i] * xhat[i];
            dgamma[i] = dgamma[i] + gr[i] * xhat[i];
            dbeta[i] = dbeta[i] + gr[i];
        }
        for i in 0..d {
            dr[i] = rstd * (dxhat[i] - sum_dxhat * inv_d - xhat[i] * sum_dxhat_xhat * inv_d);
        }
    }
    (dx, dgamma, dbeta)
}

/// Channel-wise statistics of an `[n, c, spatial]` buffer: `(mean, biased var)`.
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize_lossy(n * spatial);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            s = s + x[off..off + spatial].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            v = v + x[off..off + spatial].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Affine channel normalization with precomputed per-channel `mean` and `invstd`.
pub fn channel_normalize<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    invstd: &[T],
    n: usize,
    spatial: usize,
) -> Vec<T> {
    let c = gamma.len();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            let scale = gamma[ch] * invstd[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for i in off..off + spatial {
                out[i] = x[i] * scale + shift;
            }
        }
    }
    out
}

/// Batch-norm backward. With `train` the mean and variance are functions of
/// the batch; otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    invstd: &[T],
    gy: &[T],
    n: usize,
    spatial: usize,
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let count = T::from_usize_lossy(n * spatial);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is) = (mean[ch], invstd[ch]);
        let mut sum_g = T::zero();
        let mut sum_g_xhat = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                let xhat = (x[i] - m) * is;
                sum_g = sum_g + gy[i];
                sum_g_xhat = sum_g_xhat + gy[i] * xhat;
            }
        }
        dgamma[ch] = sum_g_xhat;
        dbeta[ch] = sum_g;
        let k = gamma[ch] * is;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                dx[i] = if train {
                    let xhat = (x[i] - m) * is;
                    k * (gy[i] - sum_g / count - xhat * sum_g_xhat / count)
                } else {
                    k * gy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Geometry of fused multi-head attention over `qkv: [n, p, 3 * dim]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn qkv_view<'a, T>(&self, qkv: &'a [T], b: usize, which: usize, h: usize) -> MatRef<'a, T> {
        MatRef {
            data: qkv,
            offset: b * self.tokens * 3 * self.dim + which * self.dim + h * self.head_dim(),
            rows: self.tokens,
            cols: self.head_dim(),
            row_stride: 3 * self.dim,
            col_stride: 1,
        }
    }
}

/// Returns `(output [n, p, dim], probabilities [n, heads, p, p])`.
pub fn attention_forward<T: Scalar>(qkv: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let (p, dh) = (g.tokens, g.head_dim());
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut out = vec![T::zero(); g.batch * p * g.dim];
    let mut probs = vec![T::zero(); g.batch * g.heads * p * p];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let pr = &mut probs[(b * g.heads + h) * p * p..(b * g.heads + h + 1) * p * p];
            gemm(
                g.qkv_view(qkv, b, 0, h),
                g.qkv_view(qkv, b, 1, h).t(),
                T::zero(),
                MatMut::row_major(pr, p, p),
            );
            for row in pr.chunks_mut(p) {
                for v in row.iter_mut() {
                    *v = *v * scale;
                }
                softmax_in_place(row);
            }
            gemm(
                MatRef::row_major(pr, p, p),
                g.qkv_view(qkv, b, 2, h),
                T::zero(),
                MatMut {
                    data: &mut out,
                    offset: b * p * g.dim + h * dh,
                    rows: p,
                    cols: dh,
                    row_stride: g.dim,
                    col_stride: 1,
                },
            );
        }
    }
    (out, probs)
}

pub fn attention_backward<T: Scalar>(qkv: &[T], probs: &[T], gy: &[T], g: &AttnGeom) -> Vec<T> {
    let (p, dh) = (g.tokens, g.head_dim());
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dprobs = vec![T::zero(); p * p];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let pr = &probs[(b * g.heads + h) * p * p..(b * g.heads + h + 1) * p * p];
            let go = MatRef {
                data: gy,
                offset: b * p * g.dim + h * dh,
                rows: p,
                cols: dh,
                row_stride: g.dim,
                col_stride: 1,
            };
            let base = b * p * 3 * g.dim + h * dh;
            // dV = A^T dO
            gemm(MatRef::row_major(pr, p, p).t(), go, T::zero(), qkv_slot(&mut dqkv, base + 2 * g.dim, p, dh, 3 * g.dim));
            // dA = dO V^T, then through the softmax
            gemm(go, g.qkv_view(qkv, b, 2, h).t(), T::zero(), MatMut::row_major(&mut dprobs, p, p));
            let mut ds = softmax_rows_backward(pr, &dprobs, p);
            for v in ds.iter_mut() {
                *v = *v * scale;
            }
            // dQ = dS K, dK = dS^T Q
            gemm(
                MatRef::row_major(&ds, p, p),
                g.qkv_view(qkv, b, 1, h),
                T::zero(),
                qkv_slot(&mut dqkv, base, p, dh, 3 * g.dim),
            );
            gemm(
                MatRef::row_major(&ds, p, p).t(),
                g.qkv_view(qkv, b, 0, h),
                T::zero(),
                qkv_slot(&mut dqkv, base + g.dim, p, dh, 3 * g.dim),
            );
        }
    }
    dqkv
}

fn qkv_slot<T>(buf: &mut [T], offset: usize, rows: usize, cols: usize, row_stride: usize) -> MatMut<'_, T> {
    MatMut {
        data: buf,
        offset,
        rows,
        cols,
        row_stride,
        col_stride: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_formula() {
        assert_eq!(ConvGeom::out_extent(224, 3, 2, 1), Some(112));
        assert_eq!(ConvGeom::out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(ConvGeom::out_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn gelu_scalar_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746).abs() < 1e-6);
    }
}
