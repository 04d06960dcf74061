//! Derivation of independent RNG streams from a base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `stream` of `base`, labelled by `domain`.
pub fn derive_seed(base: u64, domain: u64, stream: u64) -> u64 {
    mix(mix(mix(base) ^ domain) ^ stream)
}

pub fn stream_rng(base: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, domain, stream))
}

pub mod domain {
    pub const IDENTITIES: u64 = 1;
    pub const TRACKLET: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EPOCH: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
}
