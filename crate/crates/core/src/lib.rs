//! Dual-stream 3D vector-quantized autoencoder for paired-modality volumes.
//!
//! An attention backbone splits each volume into a quantized anatomical
//! latent and a continuous modality latent; the decoder rebuilds the volume
//! from the anatomy under FiLM modulation computed from the modality stream,
//! which makes cross-modal swaps a matter of exchanging FiLM parameters.
//! Everything runs on CPU over a small tape-based autodiff engine.

pub mod attention;
pub mod autograd;
pub mod cli;
pub mod codebook;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
