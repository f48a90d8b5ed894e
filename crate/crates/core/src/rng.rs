//! Deterministic seed derivation.
//!
//! Every randomized stage (bootstrap draws, parameter init, data generation,
//! epoch shuffles) derives its own ChaCha stream from a master seed plus a
//! fixed tag path. Streams are independent of each other, so e.g. adding
//! subjects to a synthetic dataset never perturbs the subjects that already
//! existed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a tag path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix(seed);
    for &tag in path {
        state = splitmix(state ^ tag.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    state
}

/// A ChaCha stream for the given seed and tag path.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stable tags for the top-level stream families.
pub mod tag {
    pub const BOOTSTRAP: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const EPOCH_SHUFFLE: u64 = 3;
    pub const SYNTH_SUBJECT: u64 = 4;
    pub const SYNTH_PARAMS: u64 = 5;
}
