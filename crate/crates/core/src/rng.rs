//! Seeded random streams. Each consumer draws from its own ChaCha stream so
//! that, e.g., classifier shuffling and inversion sampling stay independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Named stream ids.
pub mod streams {
    pub const INIT_CLASSIFIER: u64 = 1;
    pub const INIT_GENERATOR: u64 = 2;
    pub const GARBAGE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const INVERSION: u64 = 5;
    pub const GENERATION: u64 = 6;
    pub const DATA: u64 = 7;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
