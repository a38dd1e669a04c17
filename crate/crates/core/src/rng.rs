//! Deterministic seed derivation.
//!
//! Every random stream in the laboratory is a ChaCha8 generator seeded from a
//! 64-bit value obtained by folding a master seed with a list of integer labels
//! through SplitMix64: `s0 = mix(master)`, `s_{k+1} = mix(s_k ^ mix(label_k + K))`
//! with `K = 0x9E37_79B9_7F4A_7C15`. Distinct label paths give independent
//! streams; the same path always replays the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix64(master), |s, &l| {
        splitmix64(s ^ splitmix64(l.wrapping_add(GOLDEN)))
    })
}

pub fn rng_for(master: u64, labels: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, labels))
}

/// Well-known label constants for the simulation pipeline.
pub mod labels {
    pub const GRID: u64 = 1;
    pub const FRAME: u64 = 2;
    pub const RISK: u64 = 3;
    pub const OUTCOMES: u64 = 4;
    pub const SURVEY: u64 = 5;
    pub const FIT: u64 = 6;
    pub const DRAWS: u64 = 7;
    pub const AGGREGATE: u64 = 8;
}
