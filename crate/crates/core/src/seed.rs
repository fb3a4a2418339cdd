//! Deterministic seed derivation.
//!
//! Every stochastic stage draws from a ChaCha stream whose seed is a pure
//! function of the run seed and a tuple of stage/step coordinates, so any
//! step can be replayed without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Stream tags, kept distinct so stages never share a stream.
pub mod stream {
    pub const SYNTH: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const REDUCER: u64 = 7;
    pub const PROBE: u64 = 8;
}
