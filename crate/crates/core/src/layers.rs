//! Differentiable building blocks over NCHW buffers: strided convolution, its
//! transpose, fully connected layers, batch normalization and pointwise activations.
//!
//! Every forward function returns what its backward counterpart needs; no layer
//! keeps hidden state.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{gemm, Mat};

/// Shape of a 2-D convolution with TensorFlow-style `SAME` padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch_len()
    }
}

/// Output positions `lo..hi` whose tap `k` lands inside `0..limit`, and the input
/// index of position `lo`.
#[inline]
fn valid_span(out: usize, k: usize, stride: usize, pad: usize, limit: usize) -> (usize, usize, usize) {
    // o·stride + k - pad in [0, limit)
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if limit + pad > k { (limit + pad - k).div_ceil(stride).min(out) } else { 0 };
    let hi = hi.max(lo);
    (lo, hi, (lo * stride + k).saturating_sub(pad))
}

/// Unfold `x` (`batch × in_c × in_h × in_w`) into a `patch_len × (batch·out_plane)` matrix.
pub fn im2col(g: &ConvGeom, batch: usize, x: &[f64], cols: &mut [f64]) {
    let p = g.out_plane();
    let width = batch * p;
    debug_assert_eq!(x.len(), batch * g.in_c * g.in_plane());
    debug_assert_eq!(cols.len(), g.patch_len() * width);
    for c in 0..g.in_c {
        for ky in 0..g.kernel {
            let (y_lo, y_hi, iy0) = valid_span(g.out_h, ky, g.stride, g.pad_top, g.in_h);
            for kx in 0..g.kernel {
                let (x_lo, x_hi, ix0) = valid_span(g.out_w, kx, g.stride, g.pad_left, g.in_w);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for b in 0..batch {
                    let plane = &x[(b * g.in_c + c) * g.in_plane()..][..g.in_plane()];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    dst[..y_lo * g.out_w].fill(0.0);
                    dst[y_hi * g.out_w..].fill(0.0);
                    for oy in y_lo..y_hi {
                        let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        let src = &plane[(iy0 + (oy - y_lo) * g.stride) * g.in_w..][..g.in_w];
                        line[..x_lo].fill(0.0);
                        line[x_hi..].fill(0.0);
                        for (v, ix) in line[x_lo..x_hi].iter_mut().zip((ix0..).step_by(g.stride)) {
                            *v = src[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto `dx`.
pub fn col2im(g: &ConvGeom, batch: usize, cols: &[f64], dx: &mut [f64]) {
    let p = g.out_plane();
    let width = batch * p;
    debug_assert_eq!(dx.len(), batch * g.in_c * g.in_plane());
    for c in 0..g.in_c {
        for ky in 0..g.kernel {
            let (y_lo, y_hi, iy0) = valid_span(g.out_h, ky, g.stride, g.pad_top, g.in_h);
            for kx in 0..g.kernel {
                let (x_lo, x_hi, ix0) = valid_span(g.out_w, kx, g.stride, g.pad_left, g.in_w);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * width..(row + 1) * width];
                for b in 0..batch {
                    let plane = &mut dx[(b * g.in_c + c) * g.in_plane()..][..g.in_plane()];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oy in y_lo..y_hi {
                        let dst = &mut plane[(iy0 + (oy - y_lo) * g.stride) * g.in_w..][..g.in_w];
                        let line = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                        for (v, ix) in line.iter().zip((ix0..).step_by(g.stride)) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `(channels × batch·plane)` → `(batch × channels × plane)`.
fn unfold_channels(channels: usize, batch: usize, plane: usize, mat: &[f64], out: &mut [f64]) {
    for c in 0..channels {
        for b in 0..batch {
            out[(b * channels + c) * plane..][..plane].copy_from_slice(&mat[c * batch * plane + b * plane..][..plane]);
        }
    }
}

/// `(batch × channels × plane)` → `(channels × batch·plane)`.
fn fold_channels(channels: usize, batch: usize, plane: usize, x: &[f64], out: &mut [f64]) {
    for b in 0..batch {
        for c in 0..channels {
            out[c * batch * plane + b * plane..][..plane].copy_from_slice(&x[(b * channels + c) * plane..][..plane]);
        }
    }
}

/// Row-major `rows × cols` → `cols × rows`.
fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn channel_sums(channels: usize, batch: usize, plane: usize, x: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; channels];
    for b in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += x[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    sums
}

fn add_channel_bias(channels: usize, batch: usize, plane: usize, bias: &[f64], y: &mut [f64]) {
    for b in 0..batch {
        for (c, bv) in bias.iter().enumerate() {
            y[(b * channels + c) * plane..][..plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Unfolded patch matrices are built a few images at a time so they stay in cache.
const COLS_BUDGET: usize = 1 << 16;

fn chunk_len(patch_len: usize, plane: usize, batch: usize) -> usize {
    (COLS_BUDGET / (patch_len * plane).max(1)).clamp(1, batch.max(1))
}

/// Saved state of a convolution forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    x: Vec<f64>,
}

/// Parameter and input gradients of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

/// Strided convolution. `weight` is `out_c × patch_len`, `bias` has `out_c` entries.
pub fn conv2d_forward(g: &ConvGeom, batch: usize, x: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, ConvCache) {
    let (p, k) = (g.out_plane(), g.patch_len());
    let (in_len, out_len) = (g.in_c * g.in_plane(), g.out_c * p);
    let step = chunk_len(k, p, batch);
    let mut y = vec![0.0; batch * out_len];
    let mut cols = vec![0.0; k * step * p];
    let mut mat = vec![0.0; g.out_c * step * p];
    for b0 in (0..batch).step_by(step) {
        let n = step.min(batch - b0);
        let cols = &mut cols[..k * n * p];
        im2col(g, n, &x[b0 * in_len..(b0 + n) * in_len], cols);
        let mat = &mut mat[..g.out_c * n * p];
        gemm(g.out_c, k, n * p, 1.0, Mat::N(weight), Mat::N(cols), 0.0, mat);
        unfold_channels(g.out_c, n, p, mat, &mut y[b0 * out_len..(b0 + n) * out_len]);
    }
    add_channel_bias(g.out_c, batch, p, bias, &mut y);
    (y, ConvCache { x: x.to_vec() })
}

pub fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    cache: &ConvCache,
    weight: &[f64],
    dy: &[f64],
    need_weight: bool,
    need_input: bool,
) -> LayerGrads {
    let (p, k) = (g.out_plane(), g.patch_len());
    let (in_len, out_len) = (g.in_c * g.in_plane(), g.out_c * p);
    let step = chunk_len(k, p, batch);
    // Accumulated as `patch_len × out_c`, which keeps the patch matrix untransposed.
    let mut dw_t = vec![0.0; if need_weight { g.weight_len() } else { 0 }];
    let mut dx = need_input.then(|| vec![0.0; batch * in_len]);
    let mut cols = vec![0.0; k * step * p];
    let mut dmat = vec![0.0; g.out_c * step * p];
    for b0 in (0..batch).step_by(step) {
        let n = step.min(batch - b0);
        let dmat = &mut dmat[..g.out_c * n * p];
        fold_channels(g.out_c, n, p, &dy[b0 * out_len..(b0 + n) * out_len], dmat);
        let cols = &mut cols[..k * n * p];
        if need_weight {
            im2col(g, n, &cache.x[b0 * in_len..(b0 + n) * in_len], cols);
            gemm(k, n * p, g.out_c, 1.0, Mat::N(cols), Mat::T(dmat), 1.0, &mut dw_t);
        }
        if let Some(dx) = dx.as_mut() {
            // Reuse the patch buffer for the patch gradients.
            gemm(k, g.out_c, n * p, 1.0, Mat::T(weight), Mat::N(dmat), 0.0, cols);
            col2im(g, n, cols, &mut dx[b0 * in_len..(b0 + n) * in_len]);
        }
    }
    let db = channel_sums(g.out_c, batch, p, dy);
    let weight = if need_weight { transpose(k, g.out_c, &dw_t) } else { Vec::new() };
    LayerGrads { weight, bias: db, input: dx }
}

/// Transposed (fractionally strided) convolution, defined as the adjoint of the
/// convolution `mirror` which maps the *output* shape back to the *input* shape.
///
/// Input is `batch × mirror.out_c × mirror.out_h × mirror.out_w`, output is
/// `batch × mirror.in_c × mirror.in_h × mirror.in_w`. `weight` is laid out like the
/// mirror convolution's (`mirror.out_c × patch_len`), `bias` has `mirror.in_c` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvGeom {
    pub mirror: ConvGeom,
}

impl DeconvGeom {
    /// Upsample `in_c × in_h × in_w` by `stride` to `out_c` channels.
    pub fn upsample(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let mirror = ConvGeom::same(out_c, in_h * stride, in_w * stride, in_c, kernel, stride);
        debug_assert_eq!((mirror.out_h, mirror.out_w), (in_h, in_w));
        Self { mirror }
    }

    pub fn in_len(&self) -> usize {
        self.mirror.out_c * self.mirror.out_plane()
    }

    pub fn out_len(&self) -> usize {
        self.mirror.in_c * self.mirror.in_plane()
    }
}

#[derive(Debug, Clone)]
pub struct DeconvCache {
    x: Vec<f64>,
}

pub fn deconv2d_forward(
    g: &DeconvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, DeconvCache) {
    let m = &g.mirror;
    let (p, k) = (m.out_plane(), m.patch_len());
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let step = chunk_len(k, p, batch);
    let mut y = vec![0.0; batch * out_len];
    let mut x_mat = vec![0.0; m.out_c * step * p];
    let mut cols = vec![0.0; k * step * p];
    for b0 in (0..batch).step_by(step) {
        let n = step.min(batch - b0);
        let x_mat = &mut x_mat[..m.out_c * n * p];
        fold_channels(m.out_c, n, p, &x[b0 * in_len..(b0 + n) * in_len], x_mat);
        let cols = &mut cols[..k * n * p];
        gemm(k, m.out_c, n * p, 1.0, Mat::T(weight), Mat::N(x_mat), 0.0, cols);
        col2im(m, n, cols, &mut y[b0 * out_len..(b0 + n) * out_len]);
    }
    add_channel_bias(m.in_c, batch, m.in_plane(), bias, &mut y);
    (y, DeconvCache { x: x.to_vec() })
}

pub fn deconv2d_backward(
    g: &DeconvGeom,
    batch: usize,
    cache: &DeconvCache,
    weight: &[f64],
    dy: &[f64],
    need_input: bool,
) -> LayerGrads {
    let m = &g.mirror;
    let (p, k) = (m.out_plane(), m.patch_len());
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let step = chunk_len(k, p, batch);
    let mut dw_t = vec![0.0; m.weight_len()];
    let mut dx = need_input.then(|| vec![0.0; batch * in_len]);
    let mut dcols = vec![0.0; k * step * p];
    let mut mat = vec![0.0; m.out_c * step * p];
    for b0 in (0..batch).step_by(step) {
        let n = step.min(batch - b0);
        let dcols = &mut dcols[..k * n * p];
        im2col(m, n, &dy[b0 * out_len..(b0 + n) * out_len], dcols);
        let mat = &mut mat[..m.out_c * n * p];
        fold_channels(m.out_c, n, p, &cache.x[b0 * in_len..(b0 + n) * in_len], mat);
        gemm(k, n * p, m.out_c, 1.0, Mat::N(dcols), Mat::T(mat), 1.0, &mut dw_t);
        if let Some(dx) = dx.as_mut() {
            gemm(m.out_c, k, n * p, 1.0, Mat::N(weight), Mat::N(dcols), 0.0, mat);
            unfold_channels(m.out_c, n, p, mat, &mut dx[b0 * in_len..(b0 + n) * in_len]);
        }
    }
    let db = channel_sums(m.in_c, batch, m.in_plane(), dy);
    LayerGrads { weight: transpose(k, m.out_c, &dw_t), bias: db, input: dx }
}

/// Fully connected layer: `y = x · Wᵀ + b` with `x: batch × fan_in`, `W: fan_out × fan_in`.
pub fn dense_forward(batch: usize, fan_in: usize, fan_out: usize, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; batch * fan_out];
    for row in y.chunks_exact_mut(fan_out) {
        row.copy_from_slice(bias);
    }
    gemm(batch, fan_in, fan_out, 1.0, Mat::N(x), Mat::T(weight), 1.0, &mut y);
    y
}

/// Backward of [`dense_forward`]; `x` is the forward input.
pub fn dense_backward(
    batch: usize,
    fan_in: usize,
    fan_out: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    need_input: bool,
) -> LayerGrads {
    let mut dw = vec![0.0; fan_out * fan_in];
    gemm(fan_out, batch, fan_in, 1.0, Mat::T(dy), Mat::N(x), 0.0, &mut dw);
    let mut db = vec![0.0; fan_out];
    for row in dy.chunks_exact(fan_out) {
        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
    }
    let input = need_input.then(|| {
        let mut dx = vec![0.0; batch * fan_in];
        gemm(batch, fan_out, fan_in, 1.0, Mat::N(dy), Mat::N(weight), 0.0, &mut dx);
        dx
    });
    LayerGrads { weight: dw, bias: db, input }
}

pub const BN_EPS: f64 = 1e-5;

/// Saved state of a training-mode batch normalization pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel normalization with batch statistics (biased variance).
pub fn batchnorm_forward_train(
    channels: usize,
    batch: usize,
    plane: usize,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, BatchNormCache) {
    let count = (batch * plane) as f64;
    let mut mean = channel_sums(channels, batch, plane, x);
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let mu = mean[c];
            var[c] += x[(b * channels + c) * plane..][..plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                x_hat[i] = (x[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * x_hat[i] + beta[c];
            }
        }
    }
    (y, BatchNormCache { x_hat, inv_std, mean, var })
}

/// Normalization with fixed (running) statistics.
pub fn batchnorm_forward_eval(
    channels: usize,
    batch: usize,
    plane: usize,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Vec<f64> {
    let mut y = x.to_vec();
    for b in 0..batch {
        for c in 0..channels {
            let scale = gamma[c] / math::sqrt(running_var[c] + BN_EPS);
            let shift = beta[c] - running_mean[c] * scale;
            y[(b * channels + c) * plane..][..plane].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    y
}

/// Returns `(dgamma, dbeta, dx)`.
pub fn batchnorm_backward(
    channels: usize,
    batch: usize,
    plane: usize,
    cache: &BatchNormCache,
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                dgamma[c] += dy[i] * cache.x_hat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            let k = gamma[c] * cache.inv_std[c] / count;
            for i in off..off + plane {
                dx[i] = k * (count * dy[i] - dbeta[c] - cache.x_hat[i] * dgamma[c]);
            }
        }
    }
    (dgamma, dbeta, dx)
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward_inplace(y: &[f64], dy: &mut [f64]) {
    dy.iter_mut().zip(y).for_each(|(d, &v)| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn tanh_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = math::tanh(*v));
}

/// Gradient through a tanh given its *output*.
pub fn tanh_backward_inplace(y: &[f64], dy: &mut [f64]) {
    dy.iter_mut().zip(y).for_each(|(d, &v)| *d *= 1.0 - v * v);
}
