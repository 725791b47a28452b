//! Seed derivation: every random stream is keyed by the run seed plus a
//! tuple of identifiers, so draws never depend on event ordering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(finalize(seed ^ 0x5EED), |acc, &p| {
        finalize(acc.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(finalize(p)))
    })
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Stream tags, kept distinct so streams never collide.
pub mod stream {
    pub const ORACLE: u64 = 1;
    pub const REPLAY: u64 = 2;
    pub const ARRIVALS: u64 = 3;
    pub const LENGTHS: u64 = 4;
    pub const TOKENS: u64 = 5;
    pub const HISTORY: u64 = 6;
    pub const SUCCESSORS: u64 = 7;
    pub const CODEC: u64 = 8;
    pub const TRAINING: u64 = 9;
}
