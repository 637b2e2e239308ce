//! Slice-level kernels shared by the pure tensor ops and the recording graph.

use crate::flow_mask::AttentionMask;

/// Logical `m×k` view of a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Rows of the stored buffer.
    pub rows: usize,
    /// Columns of the stored buffer.
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` where `c` is row-major `m×n`.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above pin every buffer length to the logical
    // dimensions and strides handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax over the allowed entries. Blocked entries are written as
/// exact zeros. Returns the index of the first fully-blocked row, if any.
pub(crate) fn masked_softmax_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    mask: &AttentionMask,
    out: &mut [f64],
) -> Result<(), usize> {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let allow = mask.row(r);
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (v, &a) in xr.iter().zip(allow) {
            if a && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(r);
        }
        let mut sum = 0.0;
        for ((o, v), &a) in or.iter_mut().zip(xr).zip(allow) {
            if a {
                let e = (*v - max).exp();
                *o = e;
                sum += e;
            } else {
                *o = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for (o, &a) in or.iter_mut().zip(allow) {
            if a {
                *o *= inv;
            }
        }
    }
    Ok(())
}

/// Backward of a row softmax given its output `y`.
pub(crate) fn softmax_rows_backward(
    y: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    dx: &mut [f64],
) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            dx[r * cols + c] += yr[c] * (dyr[c] - dot);
        }
    }
}

/// Plain row softmax without a mask.
pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> LayerNormCache {
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    LayerNormCache { xhat, rstd }
}

/// Accumulates gradients for input, gamma and beta.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
    rows: usize,
    d: usize,
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for c in 0..d {
                dg[c] += dy[r * d + c] * cache.xhat[r * d + c];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for c in 0..d {
                db[c] += dy[r * d + c];
            }
        }
    }
    if let Some(dx) = dx {
        let inv_d = 1.0 / d as f64;
        for r in 0..rows {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for c in 0..d {
                let g = dy[r * d + c] * gamma[c];
                sum_g += g;
                sum_gx += g * cache.xhat[r * d + c];
            }
            let rs = cache.rstd[r];
            for c in 0..d {
                let g = dy[r * d + c] * gamma[c];
                let h = cache.xhat[r * d + c];
                dx[r * d + c] += rs * (g - inv_d * sum_g - h * inv_d * sum_gx);
            }
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfolds a `[channels, h·w]` map into `[channels·k·k, h·w]` columns for a
/// stride-1 convolution with zero padding `pad`.
pub(crate) fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; channels * k * k * hw];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * w + ox] = x[c * hw + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the map.
pub(crate) fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let hw = h * w;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[c * hw + iy as usize * w + ix as usize] += src[oy * w + ox];
                    }
                }
            }
        }
    }
}
