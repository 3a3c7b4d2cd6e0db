//! Counter-based noise streams.
//!
//! Every random draw is keyed by `(seed, sample index, purpose, counter)` so that
//! batch generation is independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Keeps streams for different roles disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    InitialNoise = 1,
    StepNoise = 2,
    Dataset = 3,
    Training = 4,
    Init = 5,
    Instance = 6,
    Selection = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic generator for one `(seed, index, purpose, counter)` cell.
pub fn stream(seed: u64, index: u64, purpose: Purpose, counter: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ index);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ counter);
    ChaCha8Rng::seed_from_u64(h)
}

/// `n` standard normal draws.
pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
