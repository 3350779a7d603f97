//! Seeded randomness helpers.
//!
//! Every random draw in the crate flows through a [`ChaCha8Rng`] seeded from
//! an explicit `u64`, so identical seeds reproduce identical artifacts on any
//! platform and at any thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Creates a deterministic stream for `(seed, stream)`.
///
/// Distinct stream tags give independent substreams of one top-level seed,
/// so e.g. parameter init and data order cannot alias.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Uniform u64 draw; saves callers a direct `rand` dependency.
pub fn next_u64(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen()
}

/// Standard normal draw via Box-Muller on two uniform samples.
pub fn next_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Guard u1 away from zero so ln() stays finite.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills `out` with N(0, std) draws.
pub fn fill_normal(rng: &mut ChaCha8Rng, std: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = next_normal(rng) * std;
    }
}

/// Fisher-Yates shuffle of indices 0..len.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
