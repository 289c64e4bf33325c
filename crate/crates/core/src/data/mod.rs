//! Dataset container, reward normalization, deduplication binning and
//! training-pair sampling.

mod dedup;
mod io;
mod normalize;
mod pairs;

pub use dedup::{bin_key, dedup_bin, BinKey};
pub use io::{read_dataset, write_dataset, EMB_MAGIC, EMB_VERSION, GOALS_MAGIC, MANIFEST_SCHEMA_VERSION};
pub use normalize::{apply_normalization, normalize_rewards, NormalizationStats, RewardRange};
pub use pairs::{sample_pairs, PairSampler, TrainingPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GoalEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Cartesian bin width in meters.
    pub eps_c: f64,
    /// Normalized-reward bin width.
    pub eps_r: f64,
    pub action_repeat_n: usize,
    /// Minimum normalized-reward gap for a pair to carry a preference.
    pub pair_min_gap: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            eps_c: 0.01,
            eps_r: 0.01,
            action_repeat_n: 5,
            pair_min_gap: 0.01,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_c > 0.0 && self.eps_r > 0.0 && self.pair_min_gap > 0.0) {
            return Err(Error::Config("eps_c, eps_r and pair_min_gap must be positive".into()));
        }
        if self.action_repeat_n == 0 {
            return Err(Error::Config("action_repeat_n must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyTag {
    Random,
    Expert,
    Mixed,
}

impl PolicyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::Random => "random",
            PolicyTag::Expert => "expert",
            PolicyTag::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub num_views: usize,
    pub tokens_per_view: usize,
    pub token_dim: usize,
    pub goal_dim: usize,
}

impl Geometry {
    pub fn sample_len(&self) -> usize {
        self.num_views * self.tokens_per_view * self.token_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub text: String,
    /// Row of the goal table.
    pub embedding_id: usize,
    /// Held-out paraphrases are never used for training.
    pub heldout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: usize,
    pub name: String,
    /// Tasks sharing a family are variants of the same scene.
    pub family: usize,
    pub variant: String,
    /// False for variants held out from training.
    pub train: bool,
    pub prompts: Vec<PromptEntry>,
    pub reward_min: f64,
    pub reward_max: f64,
}

impl TaskEntry {
    pub fn train_prompts(&self) -> impl Iterator<Item = &PromptEntry> {
        self.prompts.iter().filter(|p| !p.heldout)
    }

    pub fn range(&self) -> RewardRange {
        RewardRange {
            min: self.reward_min,
            max: self.reward_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: usize,
    pub task_id: usize,
    pub policy: PolicyTag,
    pub meta_file: String,
    pub emb_file: String,
    pub n_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub geometry: Geometry,
    pub view_configs: Vec<String>,
    pub tasks: Vec<TaskEntry>,
    pub trajectories: Vec<TrajectoryEntry>,
    /// Free-form record of how the data was produced (parameters, seeds).
    #[serde(default)]
    pub generation: serde_json::Value,
}

/// One line of a `traj_<id>.meta.jsonl` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMeta {
    pub step_index: usize,
    pub reward_raw: f64,
    pub cartesian: [f64; 3],
    pub success: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub entry: TrajectoryEntry,
    pub steps: Vec<StepMeta>,
    /// `[step][view][token][dim]`, row-major.
    pub embeddings: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalTable {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl GoalTable {
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn embedding(&self, id: usize) -> GoalEmbedding {
        GoalEmbedding {
            id,
            vector: self.row(id).iter().map(|&v| v as f64).collect(),
        }
    }
}

/// One timestep, with its reward normalized against the task's range.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub task_id: usize,
    pub trajectory_id: usize,
    /// Position of the trajectory in [`Dataset::trajectories`].
    pub traj_index: usize,
    pub step_index: usize,
    pub reward_raw: f64,
    pub reward_norm: f64,
    pub cartesian: [f64; 3],
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub goals: GoalTable,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn geometry(&self) -> Geometry {
        self.manifest.geometry
    }

    pub fn task(&self, id: usize) -> Result<&TaskEntry> {
        self.manifest
            .tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("unknown task id {id}")))
    }

    /// Embedding block of one step: `num_views × tokens_per_view × token_dim`.
    pub fn step_views(&self, traj_index: usize, step_index: usize) -> &[f32] {
        let n = self.manifest.geometry.sample_len();
        &self.trajectories[traj_index].embeddings[step_index * n..(step_index + 1) * n]
    }

    pub fn views_of(&self, step: &StepRecord) -> &[f32] {
        self.step_views(step.traj_index, step.step_index)
    }

    /// Flattened step records, normalized with each task's stored range.
    pub fn steps(&self) -> Result<(Vec<StepRecord>, NormalizationStats)> {
        let mut stats = NormalizationStats::default();
        let mut out = Vec::new();
        for (ti, traj) in self.trajectories.iter().enumerate() {
            let task = self.task(traj.entry.task_id)?;
            let range = task.range();
            for (si, s) in traj.steps.iter().enumerate() {
                out.push(StepRecord {
                    task_id: task.id,
                    trajectory_id: traj.entry.id,
                    traj_index: ti,
                    step_index: si,
                    reward_raw: s.reward_raw,
                    reward_norm: apply_normalization(s.reward_raw, range, &mut stats),
                    cartesian: s.cartesian,
                    success: s.success != 0,
                });
            }
        }
        Ok((out, stats))
    }

    /// Structural checks shared by the reader and the generator.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let g = m.geometry;
        if g.num_views == 0 || g.tokens_per_view == 0 || g.token_dim == 0 || g.goal_dim == 0 {
            return Err(Error::Config("geometry entries must be positive".into()));
        }
        if self.goals.dim != g.goal_dim {
            return Err(Error::Shape {
                file: "goals.emb".into(),
                expected: format!("dim {}", g.goal_dim),
                found: format!("dim {}", self.goals.dim),
            });
        }
        if m.view_configs.is_empty() {
            return Err(Error::Config("manifest lists no view configurations".into()));
        }
        for (i, t) in m.tasks.iter().enumerate() {
            if t.id != i {
                return Err(Error::Config(format!("task ids must be 0..n in order, found {} at {i}", t.id)));
            }
            if t.prompts.is_empty() {
                return Err(Error::Config(format!("task {} has no prompts", t.name)));
            }
            for p in &t.prompts {
                if p.embedding_id >= self.goals.len() {
                    return Err(Error::Config(format!(
                        "task {} prompt references goal row {} of {}",
                        t.name,
                        p.embedding_id,
                        self.goals.len()
                    )));
                }
            }
            if !(t.reward_max > t.reward_min) {
                return Err(Error::DegenerateTask {
                    task: t.name.clone(),
                    message: format!("reward range [{}, {}] is empty", t.reward_min, t.reward_max),
                });
            }
        }
        if m.trajectories.len() != self.trajectories.len() {
            return Err(Error::Config("manifest and loaded trajectory counts differ".into()));
        }
        for (entry, traj) in m.trajectories.iter().zip(&self.trajectories) {
            if entry != &traj.entry {
                return Err(Error::Config(format!("trajectory {} entry mismatch", entry.id)));
            }
            if entry.task_id >= m.tasks.len() {
                return Err(Error::Config(format!(
                    "trajectory {} references unknown task {}",
                    entry.id, entry.task_id
                )));
            }
            if traj.steps.len() != entry.n_steps || traj.embeddings.len() != entry.n_steps * g.sample_len() {
                return Err(Error::Shape {
                    file: entry.emb_file.clone(),
                    expected: format!("{} steps", entry.n_steps),
                    found: format!("{} meta lines, {} floats", traj.steps.len(), traj.embeddings.len()),
                });
            }
            for (i, s) in traj.steps.iter().enumerate() {
                if s.step_index != i || !s.reward_raw.is_finite() || s.cartesian.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Config(format!("trajectory {} step {i} is malformed", entry.id)));
                }
            }
        }
        Ok(())
    }
}
