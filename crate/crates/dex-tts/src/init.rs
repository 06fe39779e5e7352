//! Parameter initialization helpers. All draws go through the caller's seeded
//! generator so a model build is a pure function of (config, seed).

use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: &[usize]) -> Tensor {
    Tensor::filled(shape, 1.0)
}

/// N(0, 1/fan_in) for a [fan_in × fan_out] weight.
pub fn linear(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[0].max(1);
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// N(0, 1/(C_in·k…)) for a [C_out × C_in × k…] convolution weight.
pub fn conv(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Transposed-convolution weight [C_in × C_out × k…]; fan-in counts the input
/// channels and kernel footprint.
pub fn conv_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[0] * shape[2..].iter().product::<usize>();
    Tensor::randn(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Unit-variance table rows (embeddings).
pub fn embedding(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}
