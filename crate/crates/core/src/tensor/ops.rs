//! Eager (non-recording) versions of the core ops. They share kernels with
//! the tape, so an eager result and the corresponding node value are
//! bitwise identical.

use super::kernels;
use super::Tensor;
use crate::error::{shape_mismatch, Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_mismatch("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, n], out)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(shape_mismatch("matmul_nt", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
    Tensor::new([m, n], out)
}

/// Normalizes over the last axis only (mean 0, population variance 1).
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 {
        return Err(Error::Dimension("layer_norm needs a non-empty last axis".into()));
    }
    let mut out = vec![0.0; x.numel()];
    let mut inv = vec![0.0; x.rows()];
    kernels::layer_norm_rows(x.data(), d, eps, &mut out, &mut inv);
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    let mut out = vec![0.0; x.numel()];
    if n > 0 {
        if let Some(row) = kernels::softmax_rows(x.data(), n, &mut out) {
            return Err(Error::FullyMaskedRow { row });
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("add", a.shape(), b.shape()));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * s).collect())
        .expect("same shape")
}
