//! Pairwise logistic training loop with a deduplicated held-out split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bin_key, dedup_bin, BinKey, DataConfig, Dataset, PairSampler, StepRecord, TrainingPair};
use crate::error::{Error, Result};
use crate::metrics::{pairwise_accuracy, StratifiedAccuracy};
use crate::model::{ModelConfig, ModelGrads, RewardModel};
use crate::nn::{adamw_step, AdamWConfig, OptimizerState, DEFAULT_LEAKY_SLOPE};
use crate::synth::derive_seed;

pub const TRAIN_LOG_SCHEMA_VERSION: u32 = 1;

/// `softplus(−yΔs/τ)`.
pub fn pair_loss(delta: f64, label: f64, tau: f64) -> f64 {
    let m = -label * delta / tau;
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

/// `dℓ/dΔs = −y·σ(−yΔs/τ)/τ`.
pub fn pair_loss_grad(delta: f64, label: f64, tau: f64) -> f64 {
    -label * crate::metrics::sigmoid(-label * delta / tau) / tau
}

/// Mean pair loss over a batch and its gradient for every parameter.
pub fn pair_batch_loss(
    model: &RewardModel,
    first: &[&[f32]],
    second: &[&[f32]],
    goals: &[&[f64]],
    labels: &[f64],
    tau: f64,
) -> Result<(f64, ModelGrads)> {
    let b = labels.len();
    if first.len() != b || second.len() != b || goals.len() != b {
        return Err(Error::Contract("pair batch components differ in length".into()));
    }
    if b == 0 {
        return Err(Error::Contract("empty pair batch".into()));
    }
    let samples: Vec<&[f32]> = first.iter().chain(second).copied().collect();
    let goal_rows: Vec<&[f64]> = goals.iter().chain(goals).copied().collect();
    let (tokens, goal_mat) = model.pack_inputs(&samples, &goal_rows)?;
    let (scores, cache) = model.forward(&tokens, &goal_mat)?;
    let mut dscores = vec![0.0; 2 * b];
    let mut loss = 0.0;
    for i in 0..b {
        let delta = scores[i] - scores[b + i];
        loss += pair_loss(delta, labels[i], tau);
        let g = pair_loss_grad(delta, labels[i], tau) / b as f64;
        dscores[i] = g;
        dscores[b + i] = -g;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("pair loss is not finite".into()));
    }
    Ok((loss / b as f64, model.backward(&cache, &dscores)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub optimizer: AdamWConfig,
    pub data: DataConfig,
    pub heldout_fraction: f64,
    /// Fixed held-out pairs scored after every epoch.
    pub heldout_pairs: usize,
    pub proj_dim: usize,
    pub head_widths: Vec<usize>,
    pub film_generator_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk();
        TrainConfig {
            epochs: 200,
            pairs_per_epoch: 2000,
            batch_size: 128,
            tau: 2.0,
            optimizer: AdamWConfig::default(),
            data: DataConfig::default(),
            heldout_fraction: 0.1,
            heldout_pairs: 4000,
            proj_dim: desk.proj_dim,
            head_widths: desk.head_widths,
            film_generator_widths: desk.film_generator_widths,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, pairs_per_epoch and batch_size must be positive".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("loss temperature must be positive, got {}", self.tau)));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config("heldout_fraction must lie in (0, 1)".into()));
        }
        self.data.validate()?;
        AdamWConfig::validate(&self.optimizer)
    }

    /// Model shape for a dataset's geometry.
    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        let g = dataset.geometry();
        ModelConfig {
            token_dim: g.token_dim,
            proj_dim: self.proj_dim,
            tokens_per_view: g.tokens_per_view,
            num_views: g.num_views,
            head_widths: self.head_widths.clone(),
            goal_dim: g.goal_dim,
            film_generator_widths: self.film_generator_widths.clone(),
            leaky_slope: self.leaky_slope,
        }
    }
}

fn bin_hash(key: &BinKey) -> u64 {
    let (t, x, y, z, r) = *key;
    derive_seed(0x5EED_B175, &[t as u64, x as u64, y as u64, z as u64, r as u64])
}

/// Deduplicated steps of the training tasks, split by bin.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub train_steps: Vec<StepRecord>,
    pub heldout_steps: Vec<StepRecord>,
    /// Steps clamped during normalization.
    pub clamped: usize,
}

/// Normalizes, deduplicates and puts the lowest-hashing bins of every task
/// (a `fraction` share, at least one) into the held-out split.
pub fn prepare(dataset: &Dataset, data: &DataConfig, fraction: f64) -> Result<PreparedData> {
    data.validate()?;
    let (steps, stats) = dataset.steps()?;
    let train_tasks: Vec<usize> = dataset.manifest.tasks.iter().filter(|t| t.train).map(|t| t.id).collect();
    let kept: Vec<StepRecord> = dedup_bin(&steps, data).into_iter().filter(|s| train_tasks.contains(&s.task_id)).collect();
    let mut train_steps = Vec::new();
    let mut heldout_steps = Vec::new();
    for &task in &train_tasks {
        let mut ranked: Vec<(u64, &StepRecord)> =
            kept.iter().filter(|s| s.task_id == task).map(|s| (bin_hash(&bin_key(s, data)), s)).collect();
        if ranked.is_empty() {
            continue;
        }
        ranked.sort_by_key(|&(h, s)| (h, s.trajectory_id, s.step_index));
        let n_held = ((ranked.len() as f64 * fraction).round() as usize).clamp(1, ranked.len());
        for (k, &(_, s)) in ranked.iter().enumerate() {
            if k < n_held {
                heldout_steps.push(s.clone());
            } else {
                train_steps.push(s.clone());
            }
        }
    }
    let order = |s: &StepRecord| (s.task_id, s.trajectory_id, s.step_index);
    train_steps.sort_by_key(order);
    heldout_steps.sort_by_key(order);
    Ok(PreparedData {
        train_steps,
        heldout_steps,
        clamped: stats.clamped,
    })
}

/// Goal table rows widened to `f64`.
pub fn goal_vectors(dataset: &Dataset) -> Vec<Vec<f64>> {
    (0..dataset.goals.len())
        .map(|i| dataset.goals.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Scores both members of every pair with the pair's prompt.
pub fn score_pairs(
    model: &RewardModel,
    dataset: &Dataset,
    steps: &[StepRecord],
    pairs: &[TrainingPair],
    goals: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let samples: Vec<&[f32]> = pairs
        .iter()
        .flat_map(|p| [dataset.views_of(&steps[p.a]), dataset.views_of(&steps[p.b])])
        .collect();
    let goal_rows: Vec<&[f64]> = pairs.iter().flat_map(|p| [goals[p.prompt_id].as_slice(); 2]).collect();
    let scores = model.score_batch_parallel(&samples, &goal_rows, 256)?;
    Ok((scores.iter().step_by(2).copied().collect(), scores.iter().skip(1).step_by(2).copied().collect()))
}

/// Stratified accuracy of a model on a fixed pair set.
pub fn pair_set_accuracy(
    model: &RewardModel,
    dataset: &Dataset,
    steps: &[StepRecord],
    pairs: &[TrainingPair],
    goals: &[Vec<f64>],
) -> Result<StratifiedAccuracy> {
    let (sa, sb) = score_pairs(model, dataset, steps, pairs, goals)?;
    let scores: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    let rewards: Vec<f64> = pairs
        .iter()
        .map(|p| steps[p.a].reward_norm)
        .chain(pairs.iter().map(|p| steps[p.b].reward_norm))
        .collect();
    let n = pairs.len();
    let idx: Vec<(usize, usize)> = (0..n).map(|i| (i, n + i)).collect();
    pairwise_accuracy(&scores, &rewards, &idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub schema_version: u32,
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_accuracy: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best held-out epoch, already at checkpoint precision.
    pub best_model: RewardModel,
    pub final_model: RewardModel,
    pub best_epoch: usize,
    pub best_heldout: StratifiedAccuracy,
    pub log: Vec<EpochLog>,
    pub data: PreparedData,
    pub heldout_pairs: Vec<TrainingPair>,
}

/// Trains from scratch; `on_epoch` sees every log line as it is produced.
pub fn train(dataset: &Dataset, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    let data = prepare(dataset, &config.data, config.heldout_fraction)?;
    let tasks = &dataset.manifest.tasks;
    let goals = goal_vectors(dataset);
    let sampler = PairSampler::new(&data.train_steps, tasks, config.data.pair_min_gap)?;
    let heldout_pairs = {
        let held = PairSampler::new(&data.heldout_steps, tasks, config.data.pair_min_gap)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x4E1D]));
        held.sample(&mut rng, config.heldout_pairs)
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x1417]));
    let mut model = RewardModel::init(config.model_config(dataset), &mut init_rng)?;
    let mut opt = OptimizerState::new(config.optimizer)?;
    let mut best: Option<(RewardModel, usize, StratifiedAccuracy)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x9A12]));

    for epoch in 0..config.epochs {
        pair_rng.set_stream(epoch as u64);
        let pairs = sampler.sample(&mut pair_rng, config.pairs_per_epoch);
        let mut loss_sum = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let first: Vec<&[f32]> = batch.iter().map(|p| dataset.views_of(&data.train_steps[p.a])).collect();
            let second: Vec<&[f32]> = batch.iter().map(|p| dataset.views_of(&data.train_steps[p.b])).collect();
            let goal_rows: Vec<&[f64]> = batch.iter().map(|p| goals[p.prompt_id].as_slice()).collect();
            let labels: Vec<f64> = batch.iter().map(|p| f64::from(p.label)).collect();
            let (loss, grads) = pair_batch_loss(&model, &first, &second, &goal_rows, &labels, config.tau)?;
            loss_sum += loss * batch.len() as f64;
            let g = grads.slices();
            adamw_step(&mut model.params_mut(), &g, &mut opt)?;
        }
        // Selection sees the weights exactly as a checkpoint stores them.
        let snapshot = model.narrowed();
        let acc = pair_set_accuracy(&snapshot, dataset, &data.heldout_steps, &heldout_pairs, &goals)?;
        let score = acc.overall.unwrap_or(0.0);
        let improved = best.as_ref().is_none_or(|(_, _, b)| score > b.overall.unwrap_or(0.0));
        if improved {
            best = Some((snapshot, epoch, acc.clone()));
        }
        let line = EpochLog {
            schema_version: TRAIN_LOG_SCHEMA_VERSION,
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            heldout_accuracy: acc.overall,
            best: improved,
        };
        on_epoch(&line);
        log.push(line);
    }
    let (best_model, best_epoch, best_heldout) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_model,
        final_model: model,
        best_epoch,
        best_heldout,
        log,
        data,
        heldout_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((pair_loss(-1.0, 1.0, 2.0) - (1.0 + 0.5f64.exp()).ln()).abs() < 1e-15);
        assert!((pair_loss(-1.0, 1.0, 2.0) - 0.9741).abs() < 1e-4);
        for (y, tau) in [(1.0, 2.0), (-1.0, 0.3)] {
            assert!((pair_loss(0.0, y, tau) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(pair_loss(1e4, 1.0, 2.0) < 1e-300);
        assert!(pair_loss(-1e4, 1.0, 2.0).is_finite());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let h = 1e-6;
        for &(d, y, tau) in &[(0.3, 1.0, 2.0), (-2.0, -1.0, 0.5), (5.0, -1.0, 2.0), (0.0, 1.0, 1.0)] {
            let fd = (pair_loss(d + h, y, tau) - pair_loss(d - h, y, tau)) / (2.0 * h);
            assert!((fd - pair_loss_grad(d, y, tau)).abs() < 1e-8);
        }
    }
}
