//! Seeded random streams.
//!
//! Every consumer of randomness derives its generator from the run seed plus a
//! fixed stream id, so adding a consumer never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream ids. Values are part of the reproducibility contract; do not renumber.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const DUAL: u64 = 7;
    pub const INNER: u64 = 8;
    pub const GRAMMAR: u64 = 9;
    pub const SPLIT_TRAIN: u64 = 10;
    pub const SPLIT_VALID: u64 = 11;
    pub const SPLIT_TEST: u64 = 12;
    pub const MI: u64 = 13;
    pub const EPOCH_IWAE: u64 = 14;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive an independent child seed from a generator (for per-epoch streams).
pub fn child_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rand::RngCore::next_u64(&mut rng)
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
