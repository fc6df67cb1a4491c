//! Seed derivation and deterministic RNG construction.
//!
//! Every random draw in the crate goes through a `ChaCha8Rng` built from an
//! explicit seed, so identical seeds reproduce identical bytes on any platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG from a bare seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent sub-seed from a master seed and a textual tag.
///
/// FNV-1a over the tag bytes mixed with the master seed, finalized with
/// splitmix64. Stable across runs and platforms by construction.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ master.rotate_left(32))
}

/// Derive a sub-seed indexed by position (per-sample, per-candidate, ...).
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, tag) ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
