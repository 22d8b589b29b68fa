//! Counter-based seed derivation.
//!
//! Every random stream in the pipeline is keyed as
//! `derive_seed(master, &[tag, tag, ...])` so that grid cells, chips and
//! repeats get independent, reproducible streams without shared RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, cheap, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a path of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = mix(master ^ 0x7463_6c69_7000_0000); // "tclip"
    for &t in tags {
        state = mix(state ^ t);
    }
    state
}

/// Seeded stream RNG used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Convenience: derived child RNG.
pub fn child_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    rng_from_seed(derive_seed(master, tags))
}
