//! Quantization-aware training: hard-gated quantized forward, residual
//! group-Lasso regularization, straight-through weight gradients,
//! sigmoid-relaxed threshold gradients and Adam updates of `w`, `b` and `t`.

pub mod metrics;
pub mod reg;
pub mod sweep;
pub mod threshold;
pub mod trainer;

pub use metrics::write_metrics_csv;
pub use reg::{reg_grad, reg_loss, RegCoefficients};
pub use threshold::{sigmoid, threshold_grad, ThresholdGradOptions, ThresholdSum, Trajectory};
pub use sweep::{summarize, sweep_lambda, SweepCell, SweepOutcome};
pub use trainer::{fit, predict, EpochMetrics, GradReport, KStats, Scheme, ThresholdScope, TrainConfig, TrainState};

use crate::tensor::Tensor;

/// `dL/dw` from `dL/dw^q` under the straight-through estimator.
pub fn ste_weight_grad<T: Clone>(grad_wq: &Tensor<T>) -> Tensor<T> {
    grad_wq.clone()
}
