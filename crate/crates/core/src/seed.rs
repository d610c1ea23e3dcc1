//! Seed derivation. Every random stream in a run is derived from the run
//! seed and a stream tag, so streams stay independent of each other and of
//! the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag into a new, well-spread seed.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng(seed: u64, tag: u64) -> RunRng {
    RunRng::seed_from_u64(derive(seed, tag))
}

/// Stream tags.
pub mod stream {
    pub const SMALLNET_INIT: u64 = 1;
    pub const AUGNET_INIT: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const PAIRS: u64 = 6;
    pub const SAMPLES: u64 = 7;
    pub const STYLE_BANK: u64 = 8;
    /// Epoch shuffles use `SHUFFLE + epoch`.
    pub const SHUFFLE: u64 = 1 << 32;
}
