//! Evaluation protocol over a held-out dataset: stratified accuracy per task
//! and prompt, per-trajectory tau by policy, prompt and task variation, and
//! reliability of the raw probabilistic readout.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dedup_bin, DataConfig, Dataset, PairSampler, StepRecord, TaskEntry, TrainingPair};
use crate::error::{Error, Result};
use crate::metrics::{
    ece, kendall_tau_b, pair_probability, pairwise_accuracy, MetricsReport, PromptMetrics, PromptVariation,
    ReliabilityBins, StratifiedAccuracy, TaskMetrics, TaskVariation, TauEntry, TauReport, METRICS_SCHEMA_VERSION,
    RELIABILITY_BINS,
};
use crate::model::RewardModel;
use crate::synth::derive_seed;
use crate::train::goal_vectors;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub data: DataConfig,
    /// Pairs drawn per task (shared by all of its prompts).
    pub pairs_per_task: usize,
    /// Temperature of the uncalibrated probability readout.
    pub readout_tau: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            data: DataConfig::default(),
            pairs_per_task: 4000,
            readout_tau: 1.0,
            seed: 0,
        }
    }
}

/// Checks that a checkpoint's input geometry matches a dataset's.
pub fn check_geometry(model: &RewardModel, dataset: &Dataset) -> Result<()> {
    let g = dataset.geometry();
    let c = &model.config;
    if (c.num_views, c.tokens_per_view, c.token_dim, c.goal_dim) != (g.num_views, g.tokens_per_view, g.token_dim, g.goal_dim) {
        return Err(Error::Format {
            file: "manifest.json".into(),
            offset: 0,
            message: format!(
                "dataset geometry {}×{}×{} goal {} does not match checkpoint {}×{}×{} goal {}",
                g.num_views, g.tokens_per_view, g.token_dim, g.goal_dim, c.num_views, c.tokens_per_view, c.token_dim, c.goal_dim
            ),
        });
    }
    Ok(())
}

/// Per-task scores of every step under every prompt of the task.
pub struct ScoreTable {
    pub steps: Vec<StepRecord>,
    /// Step indices of each task, in `steps` order.
    pub task_steps: Vec<Vec<usize>>,
    /// `[task][prompt position][local step]`
    pub scores: Vec<Vec<Vec<f64>>>,
    position: HashMap<(usize, usize), usize>,
}

impl ScoreTable {
    /// `model = None` substitutes the normalized ground truth for scores.
    pub fn build(model: Option<&RewardModel>, dataset: &Dataset) -> Result<Self> {
        if let Some(m) = model {
            check_geometry(m, dataset)?;
        }
        let (steps, _) = dataset.steps()?;
        let goals = goal_vectors(dataset);
        let mut task_steps = vec![Vec::new(); dataset.manifest.tasks.len()];
        for (i, s) in steps.iter().enumerate() {
            task_steps[s.task_id].push(i);
        }
        let mut scores = Vec::with_capacity(task_steps.len());
        for (task, idx) in dataset.manifest.tasks.iter().zip(&task_steps) {
            let samples: Vec<&[f32]> = idx.iter().map(|&i| dataset.views_of(&steps[i])).collect();
            let mut per_prompt = Vec::with_capacity(task.prompts.len());
            for p in &task.prompts {
                let s = match model {
                    Some(m) => {
                        let g = vec![goals[p.embedding_id].as_slice(); samples.len()];
                        m.score_batch_parallel(&samples, &g, 256)?
                    }
                    None => idx.iter().map(|&i| steps[i].reward_norm).collect(),
                };
                per_prompt.push(s);
            }
            scores.push(per_prompt);
        }
        let position = steps
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.traj_index, s.step_index), i))
            .collect();
        Ok(ScoreTable {
            steps,
            task_steps,
            scores,
            position,
        })
    }

    /// Index into [`ScoreTable::steps`] of a step record.
    pub fn index_of(&self, step: &StepRecord) -> usize {
        self.position[&(step.traj_index, step.step_index)]
    }

    fn local(&self, task: usize, global: usize) -> usize {
        self.task_steps[task].partition_point(|&i| i < global)
    }

    pub fn score(&self, task: usize, prompt_pos: usize, global: usize) -> f64 {
        self.scores[task][prompt_pos][self.local(task, global)]
    }
}

/// Qualifying ordered pairs per task over the deduplicated steps, as
/// indices into the score table's step list.
fn task_pairs(table: &ScoreTable, tasks: &[TaskEntry], cfg: &EvalConfig) -> Result<Vec<Vec<(usize, usize)>>> {
    let dedup = dedup_bin(&table.steps, &cfg.data);
    let mut out = vec![Vec::new(); tasks.len()];
    for task in tasks {
        let own: Vec<StepRecord> = dedup.iter().filter(|s| s.task_id == task.id).cloned().collect();
        let mut as_train = task.clone();
        as_train.train = true;
        let Ok(sampler) = PairSampler::new(&own, std::slice::from_ref(&as_train), cfg.data.pair_min_gap) else {
            continue;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xE7A1, task.id as u64]));
        out[task.id] = sampler
            .sample(&mut rng, cfg.pairs_per_task)
            .into_iter()
            .map(|p| (table.index_of(&own[p.a]), table.index_of(&own[p.b])))
            .collect();
    }
    if out.iter().all(Vec::is_empty) {
        return Err(Error::Config("evaluation set has no step pair with a reward gap".into()));
    }
    Ok(out)
}

fn accuracy_for(table: &ScoreTable, task: usize, prompt_pos: usize, pairs: &[(usize, usize)]) -> Result<StratifiedAccuracy> {
    let scores: Vec<f64> = pairs
        .iter()
        .flat_map(|&(a, b)| [table.score(task, prompt_pos, a), table.score(task, prompt_pos, b)])
        .collect();
    let rewards: Vec<f64> = pairs
        .iter()
        .flat_map(|&(a, b)| [table.steps[a].reward_norm, table.steps[b].reward_norm])
        .collect();
    let idx: Vec<(usize, usize)> = (0..pairs.len()).map(|i| (2 * i, 2 * i + 1)).collect();
    pairwise_accuracy(&scores, &rewards, &idx)
}

/// Per-trajectory tau between scores under prompt `prompt_pos` and raw
/// rewards.
fn trajectory_taus(table: &ScoreTable, dataset: &Dataset, task: usize, prompt_pos: usize) -> Vec<TauEntry> {
    let mut by_traj: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in &table.task_steps[task] {
        let t = table.steps[i].traj_index;
        match by_traj.last_mut() {
            Some((ti, v)) if *ti == t => v.push(i),
            _ => by_traj.push((t, vec![i])),
        }
    }
    by_traj
        .into_iter()
        .map(|(ti, idx)| {
            let s: Vec<f64> = idx.iter().map(|&i| table.score(task, prompt_pos, i)).collect();
            let r: Vec<f64> = idx.iter().map(|&i| table.steps[i].reward_raw).collect();
            let entry = &dataset.trajectories[ti].entry;
            TauEntry {
                task_id: task,
                trajectory_id: entry.id,
                policy: entry.policy,
                tau: kendall_tau_b(&s, &r).ok(),
            }
        })
        .collect()
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub table: ScoreTable,
    /// Best training prompt position per task.
    pub best_prompt: Vec<Option<usize>>,
    pub pairs: Vec<Vec<(usize, usize)>>,
}

/// Runs the full protocol; `model = None` evaluates oracle scores.
pub fn evaluate(model: Option<&RewardModel>, dataset: &Dataset, cfg: &EvalConfig) -> Result<Evaluation> {
    cfg.data.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::Config("evaluation dataset has no trajectories".into()));
    }
    let table = ScoreTable::build(model, dataset)?;
    let tasks = &dataset.manifest.tasks;
    let pairs = task_pairs(&table, tasks, cfg)?;

    let mut task_metrics = Vec::new();
    let mut best_prompt = vec![None; tasks.len()];
    let mut best_of = StratifiedAccuracy::new();
    let mut averaged = StratifiedAccuracy::new();
    let mut train_prompts = StratifiedAccuracy::new();
    let mut heldout_prompts = StratifiedAccuracy::new();
    let mut tau_entries = Vec::new();
    let mut variation_tau = Vec::new();
    let mut variation_acc = StratifiedAccuracy::new();
    let mut variation_ids = Vec::new();
    let mut probs = Vec::new();
    let mut outcomes = Vec::new();

    for task in tasks {
        let mut prompts = Vec::new();
        let mut task_avg = StratifiedAccuracy::new();
        let mut best: Option<(usize, StratifiedAccuracy)> = None;
        for (k, p) in task.prompts.iter().enumerate() {
            let acc = accuracy_for(&table, task.id, k, &pairs[task.id])?;
            if p.heldout {
                heldout_prompts.merge(&acc);
            } else {
                task_avg.merge(&acc);
                let better = best.as_ref().is_none_or(|(_, b)| acc.overall.unwrap_or(0.0) > b.overall.unwrap_or(0.0));
                if better {
                    best = Some((k, acc.clone()));
                }
            }
            prompts.push(PromptMetrics {
                embedding_id: p.embedding_id,
                heldout: p.heldout,
                accuracy: acc,
            });
        }
        let (bp, best_acc) = match best {
            Some((k, a)) => (Some(k), a),
            None => (None, StratifiedAccuracy::new()),
        };
        best_prompt[task.id] = bp;
        let taus = bp.map(|k| trajectory_taus(&table, dataset, task.id, k)).unwrap_or_default();
        if task.train {
            best_of.merge(&best_acc);
            averaged.merge(&task_avg);
            train_prompts.merge(&task_avg);
            tau_entries.extend(taus);
            if let Some(k) = bp {
                for &(a, b) in &pairs[task.id] {
                    let ds = table.score(task.id, k, a) - table.score(task.id, k, b);
                    probs.push(pair_probability(ds, 0.0, cfg.readout_tau));
                    outcomes.push(f64::from(u8::from(table.steps[a].reward_norm > table.steps[b].reward_norm)));
                }
            }
        } else {
            variation_ids.push(task.id);
            variation_acc.merge(&best_acc);
            variation_tau.extend(taus);
        }
        task_metrics.push(TaskMetrics {
            task_id: task.id,
            name: task.name.clone(),
            train: task.train,
            prompts,
            best_prompt: bp.map(|k| task.prompts[k].embedding_id),
            best_of: best_acc,
            averaged: task_avg,
        });
    }

    let reliability: Option<ReliabilityBins> = if probs.is_empty() {
        None
    } else {
        Some(ece(&probs, &outcomes, RELIABILITY_BINS)?)
    };
    let delta = match (train_prompts.overall, heldout_prompts.overall) {
        (Some(t), Some(h)) => Some(h - t),
        _ => None,
    };
    let report = MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        oracle_scores: model.is_none(),
        best_of,
        averaged,
        tasks: task_metrics,
        tau: TauReport::from_entries(tau_entries),
        reliability,
        prompt_variation: PromptVariation {
            train_prompts,
            heldout_prompts,
            delta,
        },
        task_variation: (!variation_ids.is_empty()).then(|| TaskVariation {
            task_ids: variation_ids,
            accuracy: variation_acc,
            tau: TauReport::from_entries(variation_tau),
        }),
    };
    Ok(Evaluation {
        report,
        table,
        best_prompt,
        pairs,
    })
}

/// Unoriented `(Δs, [r_a > r_b])` pairs from the training tasks, scored
/// with each task's best prompt.
pub fn calibration_pairs(evaluation: &Evaluation, tasks: &[TaskEntry]) -> (Vec<f64>, Vec<f64>) {
    let mut deltas = Vec::new();
    let mut labels = Vec::new();
    for task in tasks.iter().filter(|t| t.train) {
        let Some(k) = evaluation.best_prompt[task.id] else {
            continue;
        };
        for &(a, b) in &evaluation.pairs[task.id] {
            let t = &evaluation.table;
            deltas.push(t.score(task.id, k, a) - t.score(task.id, k, b));
            labels.push(f64::from(u8::from(t.steps[a].reward_norm > t.steps[b].reward_norm)));
        }
    }
    (deltas, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipRate {
    pub pairs: usize,
    pub flipped: usize,
    pub rate: f64,
}

/// Scores each pair under its own prompt and under the first training
/// prompt of the sibling variant (same family). Ground truth flips for
/// every pair because the variants' rewards are complements.
pub fn goal_swap_flip_rate(
    model: &RewardModel,
    dataset: &Dataset,
    steps: &[StepRecord],
    pairs: &[TrainingPair],
) -> Result<FlipRate> {
    let goals = goal_vectors(dataset);
    let tasks = &dataset.manifest.tasks;
    let sibling = |t: &TaskEntry| {
        tasks
            .iter()
            .find(|o| o.family == t.family && o.variant != t.variant)
            .and_then(|o| o.train_prompts().next())
            .map(|p| p.embedding_id)
    };
    let mut samples = Vec::new();
    let mut goal_rows: Vec<&[f64]> = Vec::new();
    for p in pairs {
        let task = dataset.task(steps[p.a].task_id)?;
        let Some(other) = sibling(task) else {
            continue;
        };
        for g in [p.prompt_id, other] {
            samples.push(dataset.views_of(&steps[p.a]));
            samples.push(dataset.views_of(&steps[p.b]));
            goal_rows.push(&goals[g]);
            goal_rows.push(&goals[g]);
        }
    }
    let s = model.score_batch_parallel(&samples, &goal_rows, 256)?;
    let n = s.len() / 4;
    if n == 0 {
        return Err(Error::Config("no pair has a sibling variant".into()));
    }
    let flipped = s.chunks(4).filter(|c| (c[0] - c[1]) * (c[2] - c[3]) < 0.0).count();
    Ok(FlipRate {
        pairs: n,
        flipped,
        rate: flipped as f64 / n as f64,
    })
}
