//! Brute-force reference implementations shared by the test targets.

use std::ops::Range;

use rand::Rng;
use rewardrank_core::train::pair_batch_loss;
use rewardrank_core::{DataConfig, RewardModel, StepRecord};

use super::{random_goal, random_sample, rng, scrambled_model, tiny_config};

pub fn batch_loss(m: &RewardModel, first: &[Vec<f32>], second: &[Vec<f32>], goals: &[Vec<f64>], labels: &[f64]) -> f64 {
    let f: Vec<&[f32]> = first.iter().map(Vec::as_slice).collect();
    let s: Vec<&[f32]> = second.iter().map(Vec::as_slice).collect();
    let g: Vec<&[f64]> = goals.iter().map(Vec::as_slice).collect();
    pair_batch_loss(m, &f, &s, &g, labels, 2.0).unwrap().0
}

/// Central-difference check over every parameter. A coordinate whose
/// one-sided differences disagree straddles a LeakyReLU kink; it is counted
/// separately and the count is bounded.
#[allow(clippy::needless_range_loop)]
pub fn gradient_check(seeds: Range<u64>, h: f64) -> (f64, usize, usize) {
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    let mut checked = 0;
    for seed in seeds {
        let mut m = scrambled_model(tiny_config(), 200 + seed);
        let mut r = rng(300 + seed);
        let n = 5;
        let first: Vec<Vec<f32>> = (0..n).map(|_| random_sample(&m.config, &mut r)).collect();
        let second: Vec<Vec<f32>> = (0..n).map(|_| random_sample(&m.config, &mut r)).collect();
        let goals: Vec<Vec<f64>> = (0..n).map(|_| random_goal(&m.config, &mut r)).collect();
        let labels: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();

        let analytic: Vec<Vec<f64>> = {
            let f: Vec<&[f32]> = first.iter().map(Vec::as_slice).collect();
            let s: Vec<&[f32]> = second.iter().map(Vec::as_slice).collect();
            let g: Vec<&[f64]> = goals.iter().map(Vec::as_slice).collect();
            let (_, grads) = pair_batch_loss(&m, &f, &s, &g, &labels, 2.0).unwrap();
            grads.slices().iter().map(|s| s.to_vec()).collect()
        };
        let shapes: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
        assert_eq!(shapes, analytic.iter().map(Vec::len).collect::<Vec<_>>());
        let base = batch_loss(&m, &first, &second, &goals, &labels);

        for (t, &len) in shapes.iter().enumerate() {
            for i in 0..len {
                let orig = m.params()[t][i];
                m.params_mut()[t][i] = orig + h;
                let up = batch_loss(&m, &first, &second, &goals, &labels);
                m.params_mut()[t][i] = orig - h;
                let down = batch_loss(&m, &first, &second, &goals, &labels);
                m.params_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let one_sided_gap = ((up - base) / h - (base - down) / h).abs();
                if one_sided_gap > 1e-4 * numeric.abs().max(1.0) {
                    kinks += 1;
                    continue;
                }
                checked += 1;
                let rel = (analytic[t][i] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    (worst, checked, kinks)
}

/// Quadratic sign-sum tau-b with tie corrections counted pair by pair.
pub fn tau_b_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut s, mut n1, mut n2) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).unwrap() as i64;
            let dy = y[i].partial_cmp(&y[j]).unwrap() as i64;
            s += dx * dy;
            n1 += u64::from(dx == 0);
            n2 += u64::from(dy == 0);
        }
    }
    let n0 = (n * (n - 1) / 2) as u64;
    if n0 == n1 || n0 == n2 {
        return None;
    }
    Some(s as f64 / ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt())
}

/// Values drawn from a small alphabet so ties are frequent.
pub fn tied_fixture(r: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let kx = r.random_range(1..=n.max(2));
    let ky = r.random_range(1..=n.max(2));
    let x = (0..n).map(|_| r.random_range(0..kx) as f64).collect();
    let y = (0..n).map(|_| r.random_range(0..ky) as f64 * 0.5).collect();
    (x, y)
}

/// Exhaustive isotonic fit: every contiguous partition whose block means
/// are non-decreasing, keeping the one with the least weighted squared error.
pub fn isotonic_oracle(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fitted = Vec::with_capacity(n);
        let mut means = Vec::new();
        let mut start = 0;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let w: f64 = weights[start..end].iter().sum();
                let m = values[start..end].iter().zip(&weights[start..end]).map(|(v, w)| v * w).sum::<f64>() / w;
                means.push(m);
                fitted.extend(std::iter::repeat_n(m, end - start));
                start = end;
            }
        }
        if means.windows(2).any(|p| p[0] > p[1]) {
            continue;
        }
        let sse: f64 = values.iter().zip(weights).zip(&fitted).map(|((v, w), f)| w * (v - f).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fitted));
        }
    }
    best.unwrap().1
}

/// Steps on a coarse lattice so that many fall into shared bins.
pub fn clustered_steps(n: usize, seed: u64) -> Vec<StepRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let coord = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(0..6) as f64 * 0.007 - 0.02;
            StepRecord {
                task_id: r.random_range(0..3),
                trajectory_id: r.random_range(0..20),
                traj_index: 0,
                step_index: i,
                reward_raw: 0.0,
                reward_norm: r.random_range(0..8) as f64 * 0.004,
                cartesian: [coord(&mut r), coord(&mut r), coord(&mut r)],
                success: false,
            }
        })
        .collect()
}

pub fn oracle_key(s: &StepRecord, c: &DataConfig) -> (usize, i64, i64, i64, i64) {
    (
        s.task_id,
        (s.cartesian[0] / c.eps_c).floor() as i64,
        (s.cartesian[1] / c.eps_c).floor() as i64,
        (s.cartesian[2] / c.eps_c).floor() as i64,
        (s.reward_norm / c.eps_r).floor() as i64,
    )
}

/// Quadratic grouping: a step survives iff no other step with the same key
/// precedes it in `(trajectory_id, step_index)`.
pub fn dedup_oracle(steps: &[StepRecord], c: &DataConfig) -> Vec<(usize, usize, usize)> {
    let mut kept = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        let k = oracle_key(s, c);
        let beaten = steps.iter().enumerate().any(|(j, t)| {
            j != i && oracle_key(t, c) == k && (t.trajectory_id, t.step_index) < (s.trajectory_id, s.step_index)
        });
        if !beaten {
            kept.push((s.task_id, s.trajectory_id, s.step_index));
        }
    }
    kept.sort();
    kept
}
