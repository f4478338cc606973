//! Minimal layer-based CNN core: forward/backward for conv, batch norm,
//! Leaky ReLU, max-pool, dense and flatten layers, cross-entropy and Adam.

pub mod adam;
pub mod config;
pub mod layers;
pub mod loss;
pub mod network;

pub use adam::{adam_step, AdamState};
pub use config::{preset, LayerSpec, NetworkConfig, Skip, Style, PRESETS};
pub use loss::cross_entropy;
pub use network::{Buffers, Cache, Gradients, Mode, Network, Owner, ParamSlot, Params, Role};
