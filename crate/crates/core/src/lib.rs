//! Flexible per-filter power-of-two quantization of CNNs.
//!
//! Every weight of a quantized filter is a sum of `k_i` signed powers of two,
//! where `k_i` is learned per filter through trainable thresholds. The crate
//! covers the float training stack ([`nn`], [`train`]), the quantizer
//! ([`quant`]), a bit-exact shift-add integer inference engine ([`engine`]),
//! storage/operation cost accounting ([`cost`]), dataset loading ([`data`])
//! and the on-disk model format ([`model_file`]).

pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod model_file;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
