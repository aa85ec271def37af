//! Seed derivation for independent, reproducible random streams.
//!
//! Every source of randomness in a run (per-part init, per-epoch shuffles,
//! per-batch augmentation) draws from its own stream derived from the run
//! seed plus a tag path, so adding or removing one consumer never shifts
//! the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the fixed consumers of run-level randomness.
pub mod tag {
    pub const TEACHER_ENCODER: u64 = 0x01;
    pub const TEACHER_CLASSIFIER: u64 = 0x02;
    pub const STUDENT_ENCODER: u64 = 0x03;
    pub const STUDENT_CLASSIFIER: u64 = 0x04;
    pub const PROJECTOR: u64 = 0x05;
    pub const DATA_TRAIN: u64 = 0x10;
    pub const DATA_TEST: u64 = 0x11;
    pub const SHUFFLE: u64 = 0x12;
    pub const AUGMENT: u64 = 0x13;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a tag path into a base seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Deterministic RNG for the stream identified by `tags` under `seed`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}
