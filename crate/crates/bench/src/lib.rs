//! Fixtures shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamtrack_core::tensor::Tensor;

/// Seeded rng so every benchmark run measures the same inputs.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with entries uniform in [-1, 1).
pub fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(c, h, w, |_, _, _| r.gen_range(-1.0..1.0))
}
