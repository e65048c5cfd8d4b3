//! Seed derivation for reproducible, per-item random streams.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream seeded
//! through [`derive_seed`], so changing one item's stream (e.g. the noise of
//! sentence 17) never disturbs another's. The mixer is SplitMix64, which has
//! no collisions on sequential counters and is stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed, a domain tag, and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(base);
    for b in tag.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    mix(h ^ index)
}

/// A ChaCha8 stream for the given (base, tag, index) triple.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}
