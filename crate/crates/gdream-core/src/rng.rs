//! Seed derivation and deterministic RNG construction.
//!
//! Every stochastic component takes an explicit `u64` seed. Sub-streams
//! (per training step, per sample, per augmentation) are derived with a
//! splitmix mix so that replaying any step in isolation reproduces the
//! exact draws the full run saw.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mix a base seed with a salt into an independent stream seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for the given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// RNG for a derived sub-stream.
pub fn rng_for(base: u64, salt: u64) -> ChaCha12Rng {
    rng_from_seed(derive_seed(base, salt))
}
