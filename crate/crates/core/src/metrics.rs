//! Ranking and calibration metrics: stratified pairwise accuracy,
//! tie-corrected Kendall tau-b, and expected calibration error.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::PolicyTag;
use crate::error::{Error, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
/// Pairs whose normalized rewards differ by less than this are skipped.
pub const MIN_PAIR_GAP: f64 = 0.01;
pub const ACCURACY_BIN_WIDTH: f64 = 0.05;
pub const RELIABILITY_BINS: usize = 15;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub correct: u64,
    /// Absent for empty bins.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedAccuracy {
    pub bins: Vec<AccuracyBin>,
    pub total: u64,
    pub correct: u64,
    pub overall: Option<f64>,
}

impl Default for StratifiedAccuracy {
    fn default() -> Self {
        Self::new()
    }
}

impl StratifiedAccuracy {
    /// Bins of width 0.05 from 0.01; the last one closes at 1.0.
    pub fn new() -> Self {
        let n = ((1.0 - MIN_PAIR_GAP) / ACCURACY_BIN_WIDTH).round() as usize;
        // Edges as exact decimal quotients so 0.06 lands in its own bin.
        let edge = |k: usize| ((MIN_PAIR_GAP + ACCURACY_BIN_WIDTH * k as f64) * 100.0).round() / 100.0;
        let bins = (0..n)
            .map(|k| AccuracyBin {
                lo: edge(k),
                hi: if k + 1 == n { 1.0 } else { edge(k + 1) },
                count: 0,
                correct: 0,
                accuracy: None,
            })
            .collect();
        StratifiedAccuracy {
            bins,
            total: 0,
            correct: 0,
            overall: None,
        }
    }

    pub fn bin_index(&self, gap: f64) -> Option<usize> {
        if !(gap >= MIN_PAIR_GAP) {
            return None;
        }
        // The bin whose lower edge is the last one not above `gap`.
        let k = self.bins.partition_point(|b| b.lo <= gap);
        Some(k.saturating_sub(1))
    }

    pub fn record(&mut self, gap: f64, correct: bool) {
        if let Some(k) = self.bin_index(gap) {
            let b = &mut self.bins[k];
            b.count += 1;
            b.correct += u64::from(correct);
            b.accuracy = Some(b.correct as f64 / b.count as f64);
            self.total += 1;
            self.correct += u64::from(correct);
            self.overall = Some(self.correct as f64 / self.total as f64);
        }
    }

    pub fn merge(&mut self, other: &StratifiedAccuracy) {
        for (b, o) in self.bins.iter_mut().zip(&other.bins) {
            b.count += o.count;
            b.correct += o.correct;
            b.accuracy = (b.count > 0).then(|| b.correct as f64 / b.count as f64);
        }
        self.total += other.total;
        self.correct += other.correct;
        self.overall = (self.total > 0).then(|| self.correct as f64 / self.total as f64);
    }

    /// Pooled accuracy over bins whose lower edge lies in `[lo, hi)`.
    pub fn accuracy_in(&self, lo: f64, hi: f64) -> Option<f64> {
        let (n, c) = self
            .bins
            .iter()
            .filter(|b| b.lo >= lo - 1e-12 && b.lo < hi - 1e-12)
            .fold((0, 0), |(n, c), b| (n + b.count, c + b.correct));
        (n > 0).then(|| c as f64 / n as f64)
    }
}

/// Scores pairs `(i, j)`; a pair is correct iff the score difference has the
/// same strict sign as the reward difference. Score ties count as wrong.
pub fn pairwise_accuracy(scores: &[f64], rewards: &[f64], pairs: &[(usize, usize)]) -> Result<StratifiedAccuracy> {
    if scores.len() != rewards.len() {
        return Err(Error::dim("scores vs rewards", rewards.len(), scores.len()));
    }
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= scores.len() || j >= scores.len()) {
        return Err(Error::Contract(format!("pair ({i}, {j}) out of range for {} items", scores.len())));
    }
    if scores.iter().chain(rewards).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score or reward".into()));
    }
    let mut acc = StratifiedAccuracy::new();
    for &(i, j) in pairs {
        let dr = rewards[i] - rewards[j];
        let ds = scores[i] - scores[j];
        let correct = (ds > 0.0 && dr > 0.0) || (ds < 0.0 && dr < 0.0);
        acc.record(dr.abs(), correct);
    }
    Ok(acc)
}

/// Final tau-b formula from integer pair counts.
pub fn tau_b_from_counts(concordant_minus_discordant: i64, n0: u64, n1: u64, n2: u64) -> Result<f64> {
    if n0 == n1 || n0 == n2 {
        return Err(Error::UndefinedTau("a sequence is entirely tied".into()));
    }
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok(concordant_minus_discordant as f64 / denom)
}

fn tie_pairs<T: Copy>(sorted: &[T], eq: impl Fn(T, T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(w[0], w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable bottom-up merge sort returning the number of strict inversions.
fn sort_count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    let mut buf = v.to_vec();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if v[i] <= v[j] {
                    buf[k] = v[i];
                    i += 1;
                } else {
                    buf[k] = v[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                }
                k += 1;
            }
            buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
            k += mid - i;
            buf[k..k + end - j].copy_from_slice(&v[j..end]);
            start = end;
        }
        v.copy_from_slice(&buf);
        width *= 2;
    }
    swaps
}

/// Kendall tau-b with tie correction, O(n log n) (Knight's algorithm).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("kendall_tau_b y", x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::UndefinedTau(format!("need at least 2 observations, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to kendall_tau_b".into()));
    }
    let cmp = |a: f64, b: f64| a.partial_cmp(&b).unwrap_or(Ordering::Equal);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| cmp(x[a], x[b]).then(cmp(y[a], y[b])));

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let n1 = tie_pairs(&idx, |a, b| x[a] == x[b]);
    let n3 = tie_pairs(&idx, |a, b| x[a] == x[b] && y[a] == y[b]);
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let discordant = sort_count_inversions(&mut ys);
    let n2 = tie_pairs(&ys, |a, b| a == b);
    let numerator = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * discordant as i64;
    tau_b_from_counts(numerator, n0, n1, n2)
}

/// `σ((s0 − s1)/τ)`.
pub fn pair_probability(s0: f64, s1: f64, tau: f64) -> f64 {
    sigmoid((s0 - s1) / tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub mean_confidence: Option<f64>,
    pub frequency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub total: u64,
    pub ece: f64,
}

/// Expected calibration error over `bins` equal-width probability bins.
pub fn ece(probabilities: &[f64], outcomes: &[f64], bins: usize) -> Result<ReliabilityBins> {
    if probabilities.len() != outcomes.len() {
        return Err(Error::dim("ece outcomes", probabilities.len(), outcomes.len()));
    }
    if probabilities.is_empty() {
        return Err(Error::Contract("ece of an empty set".into()));
    }
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Numeric("probabilities must lie in [0, 1]".into()));
    }
    if outcomes.iter().any(|&o| o != 0.0 && o != 1.0) {
        return Err(Error::Contract("outcomes must be 0 or 1".into()));
    }
    let mut count = vec![0u64; bins];
    let mut conf = vec![0.0; bins];
    let mut pos = vec![0.0; bins];
    for (&p, &o) in probabilities.iter().zip(outcomes) {
        let k = ((p * bins as f64).floor() as usize).min(bins - 1);
        count[k] += 1;
        conf[k] += p;
        pos[k] += o;
    }
    let n = probabilities.len() as f64;
    let mut total_gap = 0.0;
    let mut out = Vec::with_capacity(bins);
    for k in 0..bins {
        let (mean_confidence, frequency) = if count[k] > 0 {
            let c = conf[k] / count[k] as f64;
            let f = pos[k] / count[k] as f64;
            total_gap += count[k] as f64 / n * (f - c).abs();
            (Some(c), Some(f))
        } else {
            (None, None)
        };
        out.push(ReliabilityBin {
            lo: k as f64 / bins as f64,
            hi: (k + 1) as f64 / bins as f64,
            count: count[k],
            mean_confidence,
            frequency,
        });
    }
    Ok(ReliabilityBins {
        bins: out,
        total: probabilities.len() as u64,
        ece: total_gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauEntry {
    pub task_id: usize,
    pub trajectory_id: usize,
    pub policy: PolicyTag,
    /// Absent when tau is undefined (constant scores or rewards).
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSummary {
    pub policy: PolicyTag,
    pub count: usize,
    pub undefined: usize,
    pub mean: Option<f64>,
    pub q25: Option<f64>,
    pub median: Option<f64>,
    pub q75: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub entries: Vec<TauEntry>,
    pub summaries: Vec<TauSummary>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

impl TauReport {
    pub fn from_entries(entries: Vec<TauEntry>) -> Self {
        let mut summaries = Vec::new();
        for policy in [PolicyTag::Expert, PolicyTag::Random, PolicyTag::Mixed] {
            let group: Vec<&TauEntry> = entries.iter().filter(|e| e.policy == policy).collect();
            if group.is_empty() {
                continue;
            }
            let mut taus: Vec<f64> = group.iter().filter_map(|e| e.tau).collect();
            taus.sort_by(f64::total_cmp);
            summaries.push(TauSummary {
                policy,
                count: group.len(),
                undefined: group.len() - taus.len(),
                mean: (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64),
                q25: quantile(&taus, 0.25),
                median: quantile(&taus, 0.5),
                q75: quantile(&taus, 0.75),
            });
        }
        TauReport { entries, summaries }
    }

    pub fn summary(&self, policy: PolicyTag) -> Option<&TauSummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub embedding_id: usize,
    pub heldout: bool,
    pub accuracy: StratifiedAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: usize,
    pub name: String,
    pub train: bool,
    pub prompts: Vec<PromptMetrics>,
    /// Training prompt with the highest overall accuracy.
    pub best_prompt: Option<usize>,
    pub best_of: StratifiedAccuracy,
    /// Pooled over all training prompts.
    pub averaged: StratifiedAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptVariation {
    pub train_prompts: StratifiedAccuracy,
    pub heldout_prompts: StratifiedAccuracy,
    /// Held-out minus training overall accuracy.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskVariation {
    pub task_ids: Vec<usize>,
    pub accuracy: StratifiedAccuracy,
    pub tau: TauReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub oracle_scores: bool,
    /// Best-of and averaged views over training tasks.
    pub best_of: StratifiedAccuracy,
    pub averaged: StratifiedAccuracy,
    pub tasks: Vec<TaskMetrics>,
    pub tau: TauReport,
    pub reliability: Option<ReliabilityBins>,
    pub prompt_variation: PromptVariation,
    pub task_variation: Option<TaskVariation>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(kendall_tau_b(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedTau(_))));
        assert!(matches!(kendall_tau_b(&[1.0], &[1.0]), Err(Error::UndefinedTau(_))));
    }

    #[test]
    fn inversions_match_brute_force() {
        let v = [3.0, 1.0, 2.0, 2.0, 5.0, 0.0, 2.0];
        let brute = (0..v.len())
            .flat_map(|i| (i + 1..v.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| v[i] > v[j])
            .count() as u64;
        let mut w = v.to_vec();
        assert_eq!(sort_count_inversions(&mut w), brute);
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn accuracy_examples() {
        let r = [0.0, 0.2, 0.5, 0.9];
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
        let good = pairwise_accuracy(&r, &r, &pairs).unwrap();
        assert_eq!(good.overall, Some(1.0));
        assert!(good.bins.iter().all(|b| b.accuracy.is_none_or(|a| a == 1.0)));
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert_eq!(pairwise_accuracy(&neg, &r, &pairs).unwrap().overall, Some(0.0));
        let flat = [1.0; 4];
        assert_eq!(pairwise_accuracy(&flat, &r, &pairs).unwrap().overall, Some(0.0));
        let counts: u64 = good.bins.iter().map(|b| b.count).sum();
        assert_eq!(counts, good.total);
    }

    #[test]
    fn accuracy_bins_edges() {
        let a = StratifiedAccuracy::new();
        assert_eq!(a.bins.len(), 20);
        assert_eq!(a.bin_index(0.005), None);
        assert_eq!(a.bin_index(0.01), Some(0));
        assert_eq!(a.bin_index(0.0599), Some(0));
        assert_eq!(a.bin_index(0.06), Some(1));
        assert_eq!(a.bin_index(1.0), Some(19));
        assert_eq!(a.bins[19].hi, 1.0);
    }

    #[test]
    fn probability_examples() {
        assert_eq!(pair_probability(1.3, 1.3, 0.7), 0.5);
        assert!((pair_probability(2.0 * 3f64.ln(), 0.0, 2.0) - 0.75).abs() < 1e-15);
        let p = pair_probability(0.4, -0.3, 1.5);
        assert!((pair_probability(-0.3, 0.4, 1.5) - (1.0 - p)).abs() < 1e-15);
    }

    #[test]
    fn ece_examples() {
        let r = ece(&[1.0, 1.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 0.0], 15).unwrap();
        assert!((r.ece - 0.5).abs() < 1e-15);
        // Two occupied bins: {0.1, 0.1} with one positive, {0.9} positive.
        let r = ece(&[0.1, 0.1, 0.9], &[1.0, 0.0, 1.0], 15).unwrap();
        let hand = (2.0 / 3.0) * (0.5f64 - 0.1).abs() + (1.0 / 3.0) * (1.0f64 - 0.9).abs();
        assert!((r.ece - hand).abs() < 1e-12);
        assert!(ece(&[], &[], 15).is_err());
        assert!(ece(&[0.5], &[0.3], 15).is_err());
    }

    #[test]
    fn tau_report_groups_by_policy() {
        let e = |p, t| TauEntry {
            task_id: 0,
            trajectory_id: 0,
            policy: p,
            tau: t,
        };
        let rep = TauReport::from_entries(vec![
            e(PolicyTag::Expert, Some(0.9)),
            e(PolicyTag::Expert, Some(0.7)),
            e(PolicyTag::Expert, None),
            e(PolicyTag::Random, Some(0.1)),
        ]);
        let ex = rep.summary(PolicyTag::Expert).unwrap();
        assert_eq!((ex.count, ex.undefined), (3, 1));
        assert!((ex.median.unwrap() - 0.8).abs() < 1e-15);
        assert!(rep.summary(PolicyTag::Mixed).is_none());
    }
}
