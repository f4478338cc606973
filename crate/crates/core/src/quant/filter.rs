use serde::{Deserialize, Serialize};

use super::code::{round_pow2, ExponentRange, PowerOfTwoCode};
use crate::tensor::Real;

/// Gate thresholds `t_0 … t_{k-1}`. `t_0` decides whether a filter is pruned,
/// `t_1` whether a second shift is spent, and so on. Infinite entries pin a
/// gate permanently open (−∞) or shut (+∞).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds(pub Vec<f64>);

impl Thresholds {
    pub fn zeros(k: usize) -> Self {
        Thresholds(vec![0.0; k])
    }

    pub fn filled(k: usize, value: f64) -> Self {
        Thresholds(vec![value; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One filter as `k_i` tensors of power-of-two codes (the fired terms, in round order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFilter {
    pub terms: Vec<Vec<PowerOfTwoCode>>,
    pub len: usize,
}

impl QuantizedFilter {
    pub fn empty(len: usize) -> Self {
        QuantizedFilter { terms: Vec::new(), len }
    }

    pub fn k(&self) -> usize {
        self.terms.len()
    }
}

#[derive(Debug, Clone)]
pub struct TraceRound<T> {
    /// `r_{i,j}`.
    pub residual: Vec<T>,
    pub norm: f64,
    pub fired: bool,
    /// `decode(R(r_{i,j}))`, evaluated whether or not the gate fired.
    pub rounded: Vec<T>,
}

/// Per-round residuals of one filter; `last` is `w_i − Q_k(w_i | t)`.
#[derive(Debug, Clone)]
pub struct ResidualTrace<T> {
    pub rounds: Vec<TraceRound<T>>,
    pub last: Vec<T>,
}

impl<T: Real> ResidualTrace<T> {
    pub fn fired_count(&self) -> usize {
        self.rounds.iter().filter(|r| r.fired).count()
    }
}

pub fn l2_norm<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

pub fn round_all<T: Real>(x: &[T], range: &ExponentRange) -> Vec<PowerOfTwoCode> {
    x.iter().map(|v| round_pow2(v.as_f64(), range)).collect()
}

/// Threshold-gated recursive quantization of one filter.
///
/// Round `j` rounds the current residual elementwise to powers of two and
/// keeps the result as a term iff `‖r_{i,j}‖₂ > t_j`; every round is gated
/// independently.
pub fn quantize_filter<T: Real>(
    w: &[T],
    t: &Thresholds,
    k: usize,
    range: &ExponentRange,
) -> (QuantizedFilter, ResidualTrace<T>) {
    assert!(t.len() >= k, "{} thresholds for k = {k}", t.len());
    let mut residual = w.to_vec();
    let mut terms = Vec::with_capacity(k);
    let mut rounds = Vec::with_capacity(k);
    for j in 0..k {
        let norm = l2_norm(&residual);
        let fired = norm > t.0[j];
        let codes = round_all(&residual, range);
        let rounded: Vec<T> = codes.iter().map(|c| c.decode()).collect();
        let next = if fired {
            residual.iter().zip(&rounded).map(|(&r, &q)| r - q).collect()
        } else {
            residual.clone()
        };
        rounds.push(TraceRound { residual: std::mem::replace(&mut residual, next), norm, fired, rounded });
        if fired {
            terms.push(codes);
        }
    }
    (QuantizedFilter { terms, len: w.len() }, ResidualTrace { rounds, last: residual })
}

/// Number of gates that fire for `w` (its shift count `k_i`).
pub fn effective_k<T: Real>(w: &[T], t: &Thresholds, k: usize, range: &ExponentRange) -> usize {
    quantize_filter(w, t, k, range).0.k()
}

/// Elementwise sum of the decoded terms.
pub fn dequantize<T: Real>(q: &QuantizedFilter) -> Vec<T> {
    let mut out = vec![T::zero(); q.len];
    for term in &q.terms {
        for (o, c) in out.iter_mut().zip(term) {
            *o += c.decode::<T>();
        }
    }
    out
}

/// Ungated residuals `r_0 = w`, `r_{j+1} = r_j − R(r_j)` for `j < k`
/// (independent of any thresholds).
pub fn ungated_residuals<T: Real>(w: &[T], k: usize, range: &ExponentRange) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(k);
    let mut r = w.to_vec();
    for _ in 0..k {
        let next = r.iter().map(|&x| x - round_pow2(x.as_f64(), range).decode::<T>()).collect();
        out.push(std::mem::replace(&mut r, next));
    }
    out
}

/// Fixed-k quantization `Q_k(w) = Q_{k-1}(w) + Q_1(w − Q_{k-1}(w))`, `Q_1 = R`.
pub fn fixed_k_quantize<T: Real>(w: &[T], k: usize, range: &ExponentRange) -> Vec<T> {
    let q1 = |x: &[T]| -> Vec<T> { x.iter().map(|v| round_pow2(v.as_f64(), range).decode::<T>()).collect() };
    match k {
        0 => vec![T::zero(); w.len()],
        1 => q1(w),
        _ => {
            let prev = fixed_k_quantize(w, k - 1, range);
            let diff: Vec<T> = w.iter().zip(&prev).map(|(&a, &b)| a - b).collect();
            prev.iter().zip(q1(&diff)).map(|(&a, b)| a + b).collect()
        }
    }
}
