//! Seed derivation. Every random draw in the crate comes from a `ChaCha8Rng`
//! seeded by mixing a base seed with a path of integer tags, so results never
//! depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a sequence of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags, kept distinct so no two consumers share a seed.
pub(crate) const TAG_INSTANCE: u64 = 0x11;
pub(crate) const TAG_DISTORT: u64 = 0x22;
pub(crate) const TAG_CLEAN: u64 = 0x33;
pub(crate) const TAG_NOISY: u64 = 0x44;
pub(crate) const TAG_EVAL: u64 = 0x55;
pub(crate) const TAG_INIT: u64 = 0x66;
pub(crate) const TAG_WARMUP: u64 = 0x77;
