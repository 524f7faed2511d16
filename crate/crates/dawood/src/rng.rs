//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream seeded by
//! hashing the master seed with a tag path (tree, level, node, role, ...).
//! Substreams are therefore independent of each other and of evaluation
//! order, which is what makes training reproducible across worker counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a base seed and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    state
}

/// Deterministic RNG for the given seed/tag path.
pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
