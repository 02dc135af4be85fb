//! Seeded random streams.
//!
//! All randomness comes from xoshiro256++ (Blackman & Vigna), seeded through
//! SplitMix64 by `seed_from_u64`. Both algorithms are fully specified, so a given
//! seed yields the same masks, initialisations, splits and graphs on every
//! platform. Independent streams derived from one seed are separated with the
//! generator's `jump()` (2^128 steps apart).

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// The `index`-th non-overlapping stream derived from `seed`.
pub fn stream(seed: u64, index: u32) -> Rng {
    let mut rng = seeded(seed);
    for _ in 0..index {
        rng.jump();
    }
    rng
}
