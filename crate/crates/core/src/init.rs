//! Parameter initialization: uniform fan-in scaling for weight matrices,
//! zeros for biases, identity for maps that should start as pass-throughs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Uniform in [-sqrt(3/fan_in), sqrt(3/fan_in)] (unit-variance-preserving).
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}

pub fn identity(n: usize) -> Tensor {
    Tensor::eye(n)
}

/// Identity plus small uniform jitter. Used where an exact identity would
/// park the forward pass on an activation kink (zero input to deeper
/// blocks), which has no well-defined gradient.
pub fn near_identity(rng: &mut ChaCha8Rng, n: usize, jitter: f64) -> Tensor {
    let mut t = Tensor::eye(n);
    for v in t.data_mut() {
        *v += rng.random_range(-jitter..jitter);
    }
    t
}
