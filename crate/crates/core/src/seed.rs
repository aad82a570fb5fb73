//! Deterministic derivation of independent RNG streams from one base seed.
//!
//! Every randomized stage (data synthesis, k-means seeding, parameter
//! init, batch sampling) draws from its own stream so that changing one
//! stage's draw count never perturbs another stage's output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a context path (stream tag, epoch, step, ...)
/// into a new 64-bit seed.
pub fn derive(base: u64, context: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &w in context {
        h = splitmix64(h ^ w);
    }
    h
}

/// An RNG for the stream identified by `(base, context)`.
pub fn stream(base: u64, context: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, context))
}
