use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{StepRecord, TaskEntry};
use crate::error::{Error, Result};

/// Two steps of the same task with a strict preference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    /// Indices into the step slice the sampler was built from.
    pub a: usize,
    pub b: usize,
    /// `+1` iff `a` has the higher normalized reward.
    pub label: i8,
    pub prompt_id: usize,
    pub view_config_id: usize,
}

/// Per-task index that draws ordered step pairs uniformly among those whose
/// normalized rewards differ by at least `min_gap`.
struct TaskPool {
    task_id: usize,
    /// Step indices sorted by normalized reward.
    sorted: Vec<usize>,
    /// Number of partners below / above each sorted position.
    below: Vec<usize>,
    above: Vec<usize>,
    /// Running total of `below + above`.
    cumulative: Vec<u64>,
    prompts: Vec<usize>,
}

impl TaskPool {
    fn build(task: &TaskEntry, steps: &[StepRecord], min_gap: f64) -> Option<TaskPool> {
        let mut sorted: Vec<usize> = (0..steps.len()).filter(|&i| steps[i].task_id == task.id).collect();
        sorted.sort_by(|&x, &y| {
            steps[x]
                .reward_norm
                .total_cmp(&steps[y].reward_norm)
                .then(x.cmp(&y))
        });
        let r: Vec<f64> = sorted.iter().map(|&i| steps[i].reward_norm).collect();
        let n = r.len();
        let mut below = Vec::with_capacity(n);
        let mut above = Vec::with_capacity(n);
        let mut cumulative = Vec::with_capacity(n);
        let mut total = 0u64;
        for &ri in &r {
            let lo = r.partition_point(|&rj| ri - rj >= min_gap);
            let hi = n - r.partition_point(|&rj| rj - ri < min_gap);
            below.push(lo);
            above.push(hi);
            total += (lo + hi) as u64;
            cumulative.push(total);
        }
        let prompts: Vec<usize> = task.train_prompts().map(|p| p.embedding_id).collect();
        if total == 0 || prompts.is_empty() {
            return None;
        }
        Some(TaskPool {
            task_id: task.id,
            sorted,
            below,
            above,
            cumulative,
            prompts,
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (usize, usize, usize) {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random_range(0..total);
        let i = self.cumulative.partition_point(|&c| c <= u);
        let k = (u - if i == 0 { 0 } else { self.cumulative[i - 1] }) as usize;
        let j = if k < self.below[i] {
            self.sorted[k]
        } else {
            self.sorted[self.sorted.len() - self.above[i] + (k - self.below[i])]
        };
        let prompt = self.prompts[rng.random_range(0..self.prompts.len())];
        (self.sorted[i], j, prompt)
    }
}

pub struct PairSampler<'a> {
    steps: &'a [StepRecord],
    pools: Vec<TaskPool>,
    /// Tasks skipped because they have no qualifying pair or prompt.
    pub skipped: Vec<String>,
}

impl<'a> PairSampler<'a> {
    /// Builds pools for every task marked for training.
    pub fn new(steps: &'a [StepRecord], tasks: &[TaskEntry], min_gap: f64) -> Result<Self> {
        let mut pools = Vec::new();
        let mut skipped = Vec::new();
        for task in tasks.iter().filter(|t| t.train) {
            match TaskPool::build(task, steps, min_gap) {
                Some(p) => pools.push(p),
                None => skipped.push(task.name.clone()),
            }
        }
        if pools.is_empty() {
            return Err(Error::Config(format!(
                "no task has a step pair with reward gap ≥ {min_gap}"
            )));
        }
        Ok(PairSampler { steps, pools, skipped })
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.pools.iter().map(|p| p.task_id).collect()
    }

    /// Tasks first, uniformly; then a qualifying ordered pair within the task.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<TrainingPair> {
        (0..count)
            .map(|_| {
                let pool = &self.pools[rng.random_range(0..self.pools.len())];
                let (a, b, prompt_id) = pool.draw(rng);
                let label = if self.steps[a].reward_norm > self.steps[b].reward_norm { 1 } else { -1 };
                TrainingPair {
                    a,
                    b,
                    label,
                    prompt_id,
                    view_config_id: 0,
                }
            })
            .collect()
    }
}

/// Deterministic pair draw; `stream` selects an independent substream
/// (one per epoch) of the seeded counter-based generator.
pub fn sample_pairs(
    steps: &[StepRecord],
    tasks: &[TaskEntry],
    min_gap: f64,
    seed: u64,
    stream: u64,
    count: usize,
) -> Result<Vec<TrainingPair>> {
    let sampler = PairSampler::new(steps, tasks, min_gap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok(sampler.sample(&mut rng, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PromptEntry;
    use std::collections::HashMap;

    fn task(id: usize) -> TaskEntry {
        TaskEntry {
            id,
            name: format!("t{id}"),
            family: id,
            variant: "forward".into(),
            train: true,
            prompts: vec![
                PromptEntry {
                    text: "a".into(),
                    embedding_id: 2 * id,
                    heldout: false,
                },
                PromptEntry {
                    text: "b".into(),
                    embedding_id: 2 * id + 1,
                    heldout: true,
                },
            ],
            reward_min: 0.0,
            reward_max: 1.0,
        }
    }

    fn steps(task_id: usize, rewards: &[f64]) -> Vec<StepRecord> {
        rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| StepRecord {
                task_id,
                trajectory_id: task_id,
                traj_index: task_id,
                step_index: i,
                reward_raw: r,
                reward_norm: r,
                cartesian: [0.0; 3],
                success: false,
            })
            .collect()
    }

    #[test]
    fn binary_rewards_give_balanced_labels() {
        let s = steps(0, &[0.0, 1.0, 0.0, 1.0]);
        let pairs = sample_pairs(&s, &[task(0)], 0.01, 1, 0, 4000).unwrap();
        let pos = pairs.iter().filter(|p| p.label == 1).count();
        assert!((1800..2200).contains(&pos), "{pos}");
        for p in &pairs {
            assert_eq!((s[p.a].reward_norm - s[p.b].reward_norm).abs(), 1.0);
            assert_eq!(p.prompt_id, 0, "held-out prompt must not be sampled");
        }
    }

    #[test]
    fn all_gaps_below_threshold_is_config_error() {
        let s = steps(0, &[0.100, 0.105, 0.109]);
        assert!(matches!(
            sample_pairs(&s, &[task(0)], 0.01, 1, 0, 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn task_without_pairs_is_skipped() {
        let mut s = steps(0, &[0.5, 0.5]);
        s.extend(steps(1, &[0.0, 0.6]));
        let sampler = PairSampler::new(&s, &[task(0), task(1)], 0.01).unwrap();
        assert_eq!(sampler.skipped, vec!["t0".to_string()]);
        assert_eq!(sampler.task_ids(), vec![1]);
    }

    #[test]
    fn draws_are_uniform_over_qualifying_ordered_pairs() {
        // rewards 0, 0.005, 0.5, 1: qualifying ordered pairs exclude (0,1),(1,0)
        let s = steps(0, &[0.0, 0.005, 0.5, 1.0]);
        let pairs = sample_pairs(&s, &[task(0)], 0.01, 9, 0, 50_000).unwrap();
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for p in &pairs {
            *counts.entry((p.a, p.b)).or_default() += 1;
        }
        assert_eq!(counts.len(), 10);
        for (&(a, b), &c) in &counts {
            assert!(!matches!((a, b), (0, 1) | (1, 0)));
            assert!((4500..5500).contains(&c), "{a},{b}: {c}");
        }
    }

    #[test]
    fn fixed_seed_is_deterministic_and_streams_differ() {
        let s = steps(0, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let a = sample_pairs(&s, &[task(0)], 0.01, 5, 3, 100).unwrap();
        let b = sample_pairs(&s, &[task(0)], 0.01, 5, 3, 100).unwrap();
        let c = sample_pairs(&s, &[task(0)], 0.01, 5, 4, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
