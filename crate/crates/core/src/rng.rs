//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by `(seed, stream, index)`, so work split across threads or reordered
//! still draws the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Streams used across the crate.
pub mod stream {
    pub const SYNTH_SAMPLE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const RESAMPLE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const EVAL_RESAMPLE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
    pub const BRANCH_DROP: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream, index))
}
