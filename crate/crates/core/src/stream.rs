//! Deterministic RNG stream derivation.
//!
//! Every stochastic operation draws from a stream derived from an explicit
//! seed plus a tag path, e.g. `(run seed, step, particle index)`. Parallel
//! schedules therefore never change results: each unit of work owns its own
//! generator and no generator is shared across work items.

use rand::rngs::SmallRng;
use rand::SeedableRng;

/// Stream tags. The values are arbitrary but fixed: changing them changes
/// every derived stream.
pub mod tags {
    pub const PROCESS_NOISE: u64 = 1;
    pub const MEASUREMENT_NOISE: u64 = 2;
    pub const TRUTH_INIT: u64 = 3;
    pub const ENSEMBLE_INIT: u64 = 4;
    pub const PARTICLE: u64 = 5;
    pub const RESAMPLE: u64 = 6;
    pub const STEP: u64 = 7;
    pub const RUN: u64 = 8;
    pub const TRUTH: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag path.
pub fn substream(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    for &tag in path {
        state = splitmix64(state ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

/// A generator seeded from `substream(seed, path)`.
pub fn rng(seed: u64, path: &[u64]) -> SmallRng {
    SmallRng::seed_from_u64(substream(seed, path))
}
