//! Seeded RNG construction and seed derivation.
//!
//! All randomness in the crate flows from explicit u64 seeds through
//! ChaCha20, so results are independent of platform and thread schedule.
//! Parallel work derives one child seed per unit up front and each worker
//! builds its own generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Derive a child seed for a named subtask. splitmix64 over the combined
/// value; distinct salts give statistically independent streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(salt.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
