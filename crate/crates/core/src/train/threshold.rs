//! Threshold gradients through the sigmoid-relaxed gates.
//!
//! The hard gate `1(‖r_l‖ > t_l)` is replaced by `σ((‖r_l‖ − t_l)/τ)` when
//! differentiating, and `R` passes gradients straight through
//! (`∂R(r)/∂t := ∂r/∂t`). For each threshold `t_j` the derivative of every
//! residual is carried forward round by round:
//!
//! ```text
//! ∂Q/∂t_j = Σ_l σ'_l/τ · (∂‖r_l‖/∂t_j − 1(l=j)) · R(r_l) + σ_l · ∂r_l/∂t_j
//! ∂r_{l+1}/∂t_j = ∂r_l/∂t_j − (l-th summand above)
//! ```
//!
//! with `∂r_l/∂t_j = 0` for `l ≤ j`.

use crate::quant::{l2_norm, round_pow2, ExponentRange, Thresholds};
use crate::tensor::Real;

/// Which residual sequence the relaxed recursion runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Trajectory {
    /// Residuals of the hard-gated forward quantization (training).
    #[default]
    Hard,
    /// Residuals of the fully relaxed surrogate `r_{l+1} = r_l − σ_l R(r_l)`.
    Soft,
}

/// How many rounds contribute to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdSum {
    /// All `k` rounds, closed gates included.
    #[default]
    AllRounds,
    /// Only the first `k_i` rounds, `k_i` being the number of fired gates.
    FiredCount,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdGradOptions {
    pub tau: f64,
    pub trajectory: Trajectory,
    pub sum: ThresholdSum,
}

impl Default for ThresholdGradOptions {
    fn default() -> Self {
        ThresholdGradOptions { tau: 1.0, trajectory: Trajectory::Hard, sum: ThresholdSum::AllRounds }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `dL/dt` (length `k`) contributed by one filter `w`, given the upstream
/// gradient `dL/dw^q` of its quantized weights.
pub fn threshold_grad<T: Real>(
    w: &[T],
    t: &Thresholds,
    upstream: &[T],
    k: usize,
    range: &ExponentRange,
    opts: &ThresholdGradOptions,
) -> Vec<f64> {
    assert_eq!(w.len(), upstream.len());
    assert!(t.len() >= k);
    let mut out = vec![0.0; k];
    if k == 0 || upstream.iter().all(|g| *g == T::zero()) {
        return out;
    }
    let n = w.len();
    let tau = opts.tau;

    // Residual trajectory with rounded values and gate surrogates.
    let mut residuals: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut rounded: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut norms = Vec::with_capacity(k);
    let mut sig = Vec::with_capacity(k);
    let mut dsig = Vec::with_capacity(k);
    let mut fired = 0;
    let mut r: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    for l in 0..k {
        let norm = l2_norm(&r);
        let q: Vec<f64> = r.iter().map(|&x| round_pow2(x, range).decode::<f64>()).collect();
        let s = sigmoid((norm - t.0[l]) / tau);
        let gate = match opts.trajectory {
            Trajectory::Hard => {
                if norm > t.0[l] {
                    1.0
                } else {
                    0.0
                }
            }
            Trajectory::Soft => s,
        };
        if norm > t.0[l] {
            fired += 1;
        }
        let next: Vec<f64> = r.iter().zip(&q).map(|(&a, &b)| a - gate * b).collect();
        norms.push(norm);
        sig.push(s);
        dsig.push(s * (1.0 - s));
        rounded.push(q);
        residuals.push(std::mem::replace(&mut r, next));
    }
    let rounds = match opts.sum {
        ThresholdSum::AllRounds => k,
        ThresholdSum::FiredCount => fired,
    };

    let up: Vec<f64> = upstream.iter().map(|v| v.as_f64()).collect();
    let mut dr = vec![0.0; n];
    let mut term = vec![0.0; n];
    for (j, slot) in out.iter_mut().enumerate() {
        dr.iter_mut().for_each(|v| *v = 0.0);
        let mut acc = 0.0;
        for l in 0..rounds {
            let dnorm = if l > j && norms[l] > 0.0 {
                residuals[l].iter().zip(&dr).map(|(a, b)| a * b).sum::<f64>() / norms[l]
            } else {
                0.0
            };
            let delta = if l == j { 1.0 } else { 0.0 };
            let dgate = dsig[l] / tau * (dnorm - delta);
            for i in 0..n {
                term[i] = dgate * rounded[l][i] + sig[l] * dr[i];
            }
            acc += up.iter().zip(&term).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                dr[i] -= term[i];
            }
        }
        *slot = acc;
    }
    out
}
