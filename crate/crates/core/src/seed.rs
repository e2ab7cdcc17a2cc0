//! Deterministic seed derivation. Every random stream in a run is keyed by
//! the global seed plus a path of integers (stream kind, client, round, ...),
//! so results do not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers used as the first path element.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const TEST_DATA: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}
