//! Bit-exact integer inference: 8-bit fixed-point activations, power-of-two
//! weights applied as shifts, 32-bit accumulation.

pub mod fixed;
pub mod plan;
pub mod shift;

pub use fixed::{quantize_activations, requantize, shift_round_half_even, Accumulator, FixedPointTensor};
pub use plan::{fold_batchnorm, leaky_shift, requantization_points, Calibration, EnginePlan, InferenceOutput, LayerParams};
pub use shift::{decompose_filters, shift_conv2d, shift_conv2d_per_bank, Bank, ShiftFilterBank, ShiftWeight};
