//! Deterministic random number generation.
//!
//! All randomness in the library flows through ChaCha12 keyed by a 64-bit
//! seed. ChaCha is a counter-based stream cipher, so fixtures are
//! reproducible bit-for-bit across platforms and across runs.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Seeded generator used for every stochastic fixture.
pub fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Row-major rows×cols matrix of standard-normal samples.
pub fn normal_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f32> = StandardNormal.sample_iter(&mut *rng).take(rows * cols).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches sample count")
}
