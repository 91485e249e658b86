//! Named seed streams. All randomness in a run is derived from one session
//! seed through `derive`, so no two consumers share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes `tags` into `seed`.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(seed, tags))
}

/// Stream tags.
pub mod tag {
    pub const TASK: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const INIT_MODEL: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const LATENCY: u64 = 5;
    pub const COMPUTE: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
    pub const FAULTS: u64 = 8;
}
