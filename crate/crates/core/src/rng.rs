//! Seeded random streams. Every consumer derives its own ChaCha stream from
//! `(seed, tag)` so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `tag` under `seed`.
pub fn stream(seed: u64, tag: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub mod tags {
    pub const DATASET: u64 = 1;
    pub const INITIAL_POOL: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const INIT: u64 = 4;
    pub const MODEL: u64 = 5;
    pub const WARM: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const MIW: u64 = 8;
    pub const ROLLOUT: u64 = 9;
    pub const SPLIT: u64 = 10;
    pub const DISC: u64 = 11;
}
