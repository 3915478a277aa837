//! Mean-reduced loss primitives built on the weighted tape kernels.

use super::{Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

impl<T: Scalar> Tape<T> {
    /// Mean negative log-likelihood over rows whose `ignore` flag is false.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<Var, TensorError> {
        if ignore.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![targets.len()],
                right: vec![ignore.len()],
            });
        }
        let kept = ignore.iter().filter(|&&i| !i).count();
        if kept == 0 {
            return Err(TensorError::EmptyAxis { op: "cross_entropy" });
        }
        let w = T::one() / T::of(kept as f64);
        let weights: Vec<T> = ignore.iter().map(|&i| if i { T::zero() } else { w }).collect();
        self.weighted_nll(logits, targets, &weights)
    }

    /// Mean over rows of `−Σ_v soft[v] · log p[v]`. `soft` is a constant.
    pub fn soft_cross_entropy_rows(&mut self, logits: Var, soft: &Tensor<T>) -> Result<Var, TensorError> {
        let rows = self.value(logits).rows();
        if rows == 0 {
            return Err(TensorError::EmptyAxis { op: "soft_cross_entropy" });
        }
        let weights = vec![T::one() / T::of(rows as f64); rows];
        self.weighted_soft_nll(logits, soft, &weights)
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mse" });
        }
        self.squared_error(a, b, T::one() / T::of(n as f64))
    }
}
