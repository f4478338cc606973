//! Group-Lasso residual regularizer `Σ_j λ_j Σ_i ‖r_{i,j}‖₂`.
//!
//! Residuals follow the ungated greedy recursion, so the penalty depends on
//! the weights only. Each `‖r_{i,j}‖₂` is differentiated treating
//! `∂r_{i,j}/∂w_i = I` (straight-through per term); the subgradient at a zero
//! residual is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{l2_norm, ungated_residuals, ExponentRange};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegCoefficients(pub Vec<f64>);

impl RegCoefficients {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if let Some(bad) = lambda.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("regularization coefficients must be finite and ≥ 0, got {bad}")));
        }
        Ok(RegCoefficients(lambda))
    }

    pub fn zeros(k: usize) -> Self {
        RegCoefficients(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&l| l == 0.0)
    }
}

/// Penalty of one layer's filters (rows of length `filter_len` in `w`).
pub fn reg_loss<T: Real>(w: &[T], filter_len: usize, lambda: &RegCoefficients, k: usize, range: &ExponentRange) -> f64 {
    if lambda.is_zero() || k == 0 {
        return 0.0;
    }
    w.chunks(filter_len)
        .map(|f| {
            ungated_residuals(f, k, range)
                .iter()
                .zip(&lambda.0)
                .map(|(r, &l)| if l == 0.0 { 0.0 } else { l * l2_norm(r) })
                .sum::<f64>()
        })
        .sum()
}

/// Adds the gradient of [`reg_loss`] with respect to `w` into `grad`.
pub fn reg_grad<T: Real>(
    w: &[T],
    filter_len: usize,
    lambda: &RegCoefficients,
    k: usize,
    range: &ExponentRange,
    grad: &mut [T],
) {
    if lambda.is_zero() || k == 0 {
        return;
    }
    for (f, g) in w.chunks(filter_len).zip(grad.chunks_mut(filter_len)) {
        for (r, &l) in ungated_residuals(f, k, range).iter().zip(&lambda.0) {
            let norm = l2_norm(r);
            if l == 0.0 || norm == 0.0 {
                continue;
            }
            let scale = l / norm;
            for (gj, &rj) in g.iter_mut().zip(r) {
                *gj += T::lit(scale * rj.as_f64());
            }
        }
    }
}
