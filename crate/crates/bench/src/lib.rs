//! Fixture generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two correlated score vectors of length `n`, with ties in the second.
pub fn ranked_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y = x.iter().map(|v| ((v + 0.3 * rng.random::<f64>()) * 20.0).round()).collect();
    (x, y)
}

/// Probabilities with noisy binary outcomes for calibration fits.
pub fn calibration_set(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let y = p.iter().map(|&q| if rng.random::<f64>() < q * q { 1.0 } else { 0.0 }).collect();
    (p, y)
}

/// Random `f32` token grids of `len` values each.
pub fn samples(count: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}
