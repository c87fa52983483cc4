//! Deterministic, hierarchical random streams.
//!
//! Every random draw in the crate comes from a stream derived from a master
//! seed plus a list of integer tags (observation index, particle index,
//! purpose). Streams derived from distinct tag lists are independent, so the
//! per-particle work is a pure function of (particle, observation, seed) and
//! results do not depend on evaluation order.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Purpose tags keeping derived streams disjoint.
pub mod tag {
    pub const TRUTH: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PARTICLE: u64 = 3;
    pub const RESAMPLE: u64 = 4;
    pub const OBS_NOISE: u64 = 5;
    pub const RUN: u64 = 6;
    pub const MEMBER: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with tags into a single 64-bit stream seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed ^ 0x6a09e667f3bcc908;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x2545f4914f6cdd1d);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Creates the random stream identified by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

/// Draws an n-vector of independent standard normals.
pub fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}
