//! Diffusion-transformer acoustic model for reference-styled mel-spectrogram
//! synthesis, built on a self-contained double-precision autodiff substrate.

pub mod adapters;
pub mod aligner;
pub mod textenc;
pub mod decoder;
pub mod error;
pub mod mel;
pub mod pipeline;
pub mod styles;
pub mod init;
pub mod tensor;

pub use error::{Error, Result};

/// Epsilon used inside every normalization denominator.
pub const NORM_EPS: f64 = 1e-5;
