//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a 64-bit value derived by mixing a base seed with stream tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `tags` into `base`; distinct tag sequences give independent streams.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags, kept in one place so that no two streams collide.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const HOLDOUT: u64 = 3;
    pub const SPRITE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const PRETRAIN_DATA: u64 = 7;
    pub const BASELINE: u64 = 8;
}
