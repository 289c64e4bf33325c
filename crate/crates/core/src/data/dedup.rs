use std::collections::HashMap;

use super::{DataConfig, StepRecord};

/// `(task, ⌊x/ε_c⌋, ⌊y/ε_c⌋, ⌊z/ε_c⌋, ⌊r/ε_r⌋)`
pub type BinKey = (usize, i64, i64, i64, i64);

pub fn bin_key(step: &StepRecord, config: &DataConfig) -> BinKey {
    let f = |v: f64, eps: f64| (v / eps).floor() as i64;
    (
        step.task_id,
        f(step.cartesian[0], config.eps_c),
        f(step.cartesian[1], config.eps_c),
        f(step.cartesian[2], config.eps_c),
        f(step.reward_norm, config.eps_r),
    )
}

/// Keeps one step per occupied (position, reward) bin: the one with the
/// lowest `(trajectory_id, step_index)`. Output is sorted by
/// `(task_id, trajectory_id, step_index)`.
pub fn dedup_bin(steps: &[StepRecord], config: &DataConfig) -> Vec<StepRecord> {
    let mut keep: HashMap<BinKey, usize> = HashMap::new();
    for (i, s) in steps.iter().enumerate() {
        let key = bin_key(s, config);
        keep.entry(key)
            .and_modify(|cur| {
                let c = &steps[*cur];
                if (s.trajectory_id, s.step_index) < (c.trajectory_id, c.step_index) {
                    *cur = i;
                }
            })
            .or_insert(i);
    }
    let mut out: Vec<StepRecord> = keep.into_values().map(|i| steps[i].clone()).collect();
    out.sort_by_key(|s| (s.task_id, s.trajectory_id, s.step_index));
    out
}
