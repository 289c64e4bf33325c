use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NormalizationStats {
    /// Rewards that fell outside the stored range and were clamped.
    pub clamped: usize,
}

/// Min-max normalizes a task's raw rewards to `[0, 1]`.
pub fn normalize_rewards(task: &str, raw: &[f64]) -> Result<(Vec<f64>, RewardRange)> {
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("non-finite reward in task {task}")));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || !(max > min) {
        return Err(Error::DegenerateTask {
            task: task.to_string(),
            message: "needs at least two distinct raw rewards".into(),
        });
    }
    let range = RewardRange { min, max };
    let mut stats = NormalizationStats::default();
    let norm = raw.iter().map(|&r| apply_normalization(r, range, &mut stats)).collect();
    Ok((norm, range))
}

/// Applies a stored range, clamping out-of-range values into `[0, 1]`.
pub fn apply_normalization(raw: f64, range: RewardRange, stats: &mut NormalizationStats) -> f64 {
    let v = (raw - range.min) / (range.max - range.min);
    if v < 0.0 {
        stats.clamped += 1;
        0.0
    } else if v > 1.0 {
        stats.clamped += 1;
        1.0
    } else {
        v
    }
}
