//! Dense tensors, a reverse-mode tape, Adam and a finite-difference gradient
//! checker.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Backward, GatherRow, Tape, Var};
pub use tensor::{Gradients, ParamStore, Scalar, Tensor};

use crate::error::{Error, Result};

/// Matrix product of two rank-≤2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = a.rows_cols();
    let (k2, m) = b.rows_cols();
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); n * m];
    kernels::gemm(n, k, m, a.data(), false, b.data(), false, &mut out, false);
    Tensor::matrix(n, m, out)
}

/// Row-wise layer normalisation over the last dimension followed by the
/// affine `gain`/`bias` transform.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap_or(&1);
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: vec![gain.len(), bias.len()],
        });
    }
    if eps < T::zero() {
        return Err(Error::InvalidArgument("layer_norm epsilon must be >= 0".into()));
    }
    let (mut y, _) = kernels::normalize_rows(x.data(), d, eps);
    for row in y.chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Softmax of a single logit row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut p = logits.to_vec();
    kernels::softmax_in_place(&mut p);
    p
}

/// `−log softmax(logits)[target]` and its gradient `softmax − onehot(target)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "target",
            index: target,
            bound: logits.len(),
        });
    }
    let lse = kernels::log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad: Vec<T> = logits.iter().map(|&x| (x - lse).exp()).collect();
    grad[target] = grad[target] - T::one();
    Ok((loss, grad))
}
