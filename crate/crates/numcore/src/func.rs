//! Plain tensor functions, for callers that do not need gradients.

use crate::error::{shape_err, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// `y = x W (+ b)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (m, k) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != k {
        return shape_err("linear", x.shape(), w.shape());
    }
    let n = w.shape()[1];
    let mut y = vec![0.0; m * n];
    if let Some(b) = b {
        if b.numel() != n {
            return shape_err("linear", w.shape(), b.shape());
        }
        for row in y.chunks_exact_mut(n) {
            row.copy_from_slice(b.data());
        }
    }
    kernels::gemm(false, false, m, k, n, x.data(), w.data(), 1.0, &mut y);
    Tensor::new(&[m, n], y)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = vec![0.0; x.numel()];
    kernels::softmax_rows(x.data(), x.cols(), &mut y);
    Tensor::from_parts(x.shape().to_vec(), y)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return shape_err("layer_norm", x.shape(), gain.shape());
    }
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; x.rows()];
    kernels::layer_norm_rows(x.data(), d, eps, &mut xhat, &mut rstd);
    for row in xhat.chunks_exact_mut(d) {
        for j in 0..d {
            row[j] = row[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), xhat))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(kernels::gelu_scalar)
}

/// Two-layer feed-forward network `GELU(x W1 + b1) W2 + b2`.
pub fn ffn(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let h = gelu(&linear(x, w1, Some(b1))?);
    linear(&h, w2, Some(b2))
}
