//! Seeded parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label, so
/// that adding a consumer does not shift the draws of another.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gaussian with standard deviation `sqrt(2 / fan_in)`, where fan-in is the
/// product of all but the leading extent.
pub fn he_normal<S: Scalar>(shape: Shape, rng: &mut Rng) -> Tensor<S> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal<S: Scalar>(shape: Shape, std: f64, rng: &mut Rng) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| S::of(dist.sample(rng)))
}
