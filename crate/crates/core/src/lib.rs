//! Continual learning with quantized latent replays, and a tiled two-level
//! memory-hierarchy cost simulator for the kernels that run it.
//!
//! The training core ([`tensor`], [`layers`], [`model`]) runs in FP32. The
//! frozen stage is post-training quantized ([`quant`], [`ptq`]) and its output
//! is stored as bit-packed latent replays ([`replay`]) that are dequantized
//! before entering the adaptive stage. [`memsim`] plans L2→L1 tiles with
//! double buffering and turns kernel efficiencies into latency, energy and
//! battery figures.

pub mod data;
pub mod error;
pub mod layers;
pub mod memsim;
pub mod model;
pub mod protocol;
pub mod ptq;
pub mod quant;
pub mod replay;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
