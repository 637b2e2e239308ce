//! Pure tensor-in, tensor-out versions of the neural ops.

use super::kernels::{self, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::flow_mask::AttentionMask;

/// Standard matrix product of an `n×k` and a `k×m` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
    }
    let mut out = vec![0.0; n * m];
    kernels::gemm(
        1.0,
        Mat::new(a.data(), n, k),
        Mat::new(b.data(), k2, m),
        0.0,
        &mut out,
    );
    let t = Tensor::new(vec![n, m], out)?;
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// Row softmax restricted to allowed keys; blocked entries come out as exact
/// zeros. A row with no allowed key is a policy error.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (n, m) = scores.dims2()?;
    if mask.rows() != n || mask.cols() != m {
        return Err(Error::Shape(format!(
            "mask {}x{} for scores {n}x{m}",
            mask.rows(),
            mask.cols()
        )));
    }
    let mut out = vec![0.0; n * m];
    kernels::masked_softmax_rows(scores.data(), n, m, mask, &mut out)
        .map_err(|r| Error::Policy(format!("softmax row {r} has no allowed key")))?;
    let t = Tensor::new(vec![n, m], out)?;
    t.ensure_finite("masked_softmax")?;
    Ok(t)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Input("layer_norm eps must be positive".into()));
    }
    let (n, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm affine params for width {d}"
        )));
    }
    let mut out = vec![0.0; n * d];
    kernels::layer_norm_forward(x.data(), n, d, gamma.data(), beta.data(), eps, &mut out);
    let t = Tensor::new(vec![n, d], out)?;
    t.ensure_finite("layer_norm")?;
    Ok(t)
}

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF evaluated through `erf`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    let t = Tensor::new(x.shape().to_vec(), data)?;
    t.ensure_finite("gelu")?;
    Ok(t)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
    Tensor::new(x.shape().to_vec(), data)
}
