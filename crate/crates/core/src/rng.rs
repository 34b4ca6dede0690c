//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based
//! generator whose output is identical on every platform. Independent
//! streams (mask sampling, shuffling, cropping, ...) are derived from the run
//! seed by hashing `(seed, stream, index)` with SplitMix64, so consuming one
//! stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Generator for draw `index` of `stream` under `seed`.
pub fn stream(seed: u64, stream: u64, index: u64) -> Rng {
    let k = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
    Rng::seed_from_u64(k)
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const HOST_MASK: u64 = 3;
    pub const SA_MASK: u64 = 4;
    pub const CROP: u64 = 5;
    pub const PROBE: u64 = 6;
}
