//! Synthetic embedding world: latent manipulation states with analytic
//! rewards, fixed random tanh encoders that emit patch-token grids, paired
//! forward/reverse task variants, and scripted data-collection policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    normalize_rewards, Dataset, Geometry, GoalTable, Manifest, PolicyTag, PromptEntry, StepMeta, TaskEntry,
    Trajectory, TrajectoryEntry, MANIFEST_SCHEMA_VERSION,
};
use crate::error::{Error, Result};

/// Half-width of the cubic workspace `[-0.5, 0.5]³`.
pub const WORKSPACE_HALF: f64 = 0.5;
/// Per-step displacement cap for every policy.
pub const MAX_STEP: f64 = 0.05;
/// The object follows the TCP when gripping within this distance.
pub const GRASP_RADIUS: f64 = 0.05;
/// A state counts as solved above this reward.
pub const SOLVED_THRESHOLD: f64 = 0.95;
/// Length of the feature vector fed to the random encoders.
pub const AUGMENTED_DIM: usize = 16;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn clamp_box(a: Vec3) -> Vec3 {
    a.map(|v| v.clamp(-WORKSPACE_HALF, WORKSPACE_HALF))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub tcp: Vec3,
    pub object: Vec3,
    pub target: Vec3,
    /// 1 while the object is held.
    pub grip: f64,
}

impl LatentState {
    pub fn in_workspace(&self) -> bool {
        [self.tcp, self.object, self.target]
            .iter()
            .flatten()
            .all(|v| v.abs() <= WORKSPACE_HALF + 1e-12)
            && (0.0..=1.0).contains(&self.grip)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Forward,
    Reverse,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Forward => "forward",
            Variant::Reverse => "reverse",
        }
    }
}

/// Dense reward in `[0, 1]`; the reverse variant is the complement.
pub fn ground_truth_reward(variant: Variant, state: &LatentState) -> f64 {
    let reach = norm(sub(state.tcp, state.object));
    let place = norm(sub(state.object, state.target));
    let forward = 0.5 * (1.0 - (5.0 * reach).tanh()) + 0.5 * (1.0 - (5.0 * place).tanh());
    match variant {
        Variant::Forward => forward,
        Variant::Reverse => 1.0 - forward,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub dtcp: Vec3,
    pub grip: bool,
}

/// Moves the TCP (clamped to the workspace); a gripped object within
/// [`GRASP_RADIUS`] moves along with it.
pub fn step_dynamics(state: &LatentState, action: &Action) -> LatentState {
    let held = action.grip && norm(sub(state.tcp, state.object)) < GRASP_RADIUS;
    let tcp = clamp_box(add(state.tcp, action.dtcp));
    let object = if held {
        clamp_box(add(state.object, sub(tcp, state.tcp)))
    } else {
        state.object
    };
    LatentState {
        tcp,
        object,
        target: state.target,
        grip: if held { 1.0 } else { 0.0 },
    }
}

fn move_toward(from: Vec3, to: Vec3) -> Vec3 {
    let d = sub(to, from);
    let n = norm(d);
    if n <= MAX_STEP {
        d
    } else {
        scale(d, MAX_STEP / n)
    }
}

/// One paraphrase set and scene layout for a (family, variant) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    pub id: usize,
    pub family: usize,
    pub variant: Variant,
    /// Nominal target location of the family.
    pub target_center: Vec3,
    pub prompt_embeddings: Vec<Vec<f64>>,
    pub encoder_seed: u64,
}

impl SynthTask {
    pub fn reward(&self, state: &LatentState) -> f64 {
        ground_truth_reward(self.variant, state)
    }

    /// Forward episodes start anywhere; reverse episodes start either
    /// anywhere or solved for the forward variant (object on target, TCP on
    /// object).
    pub fn initial_state<R: Rng>(&self, rng: &mut R) -> LatentState {
        let noise = Normal::new(0.0, 0.02).unwrap();
        let target = clamp_box(self.target_center.map(|c| c + noise.sample(rng)));
        let placed = self.variant == Variant::Reverse && rng.random_bool(0.5);
        self.start_from(target, placed, rng)
    }

    /// Start with the object anywhere, identical across variants for the
    /// same random stream.
    pub fn scattered_state<R: Rng>(&self, rng: &mut R) -> LatentState {
        let noise = Normal::new(0.0, 0.02).unwrap();
        let target = clamp_box(self.target_center.map(|c| c + noise.sample(rng)));
        self.start_from(target, false, rng)
    }

    fn start_from<R: Rng>(&self, target: Vec3, placed: bool, rng: &mut R) -> LatentState {
        let noise = Normal::new(0.0, 0.02).unwrap();
        if placed {
            let object = clamp_box(target.map(|c| c + 0.5 * noise.sample(rng)));
            LatentState {
                tcp: object,
                object,
                target,
                grip: 0.0,
            }
        } else {
            let mut u = || rng.random_range(-0.4..0.4);
            LatentState {
                tcp: [u(), u(), u()],
                object: [u(), u(), u()],
                target,
                grip: 0.0,
            }
        }
    }

    /// Where the reverse expert carries the object: across the workspace
    /// from the target.
    fn away_point(&self, state: &LatentState) -> Vec3 {
        let xy = [state.target[0], state.target[1], 0.0];
        let n = norm(xy);
        let dir = if n > 1e-9 { scale(xy, -1.0 / n) } else { [-1.0, 0.0, 0.0] };
        clamp_box(add(state.target, scale(dir, 0.6)))
    }

    pub fn expert_action(&self, state: &LatentState) -> Action {
        let reach = norm(sub(state.tcp, state.object));
        let aligned = reach < 1e-6;
        match self.variant {
            Variant::Forward => {
                if !aligned {
                    Action {
                        dtcp: move_toward(state.tcp, state.object),
                        grip: false,
                    }
                } else {
                    Action {
                        dtcp: move_toward(state.object, state.target),
                        grip: true,
                    }
                }
            }
            Variant::Reverse => {
                let place = norm(sub(state.object, state.target));
                if place < 0.55 {
                    if !aligned {
                        Action {
                            dtcp: move_toward(state.tcp, state.object),
                            grip: false,
                        }
                    } else {
                        Action {
                            dtcp: move_toward(state.object, self.away_point(state)),
                            grip: true,
                        }
                    }
                } else {
                    let retreat = clamp_box(add(state.object, [0.0, 0.0, 0.45]));
                    Action {
                        dtcp: move_toward(state.tcp, retreat),
                        grip: false,
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Draw a bounded random action and repeat it `n` times.
    RandomRepeat(usize),
    /// Scripted expert; the episode ends as soon as the task is solved.
    Expert,
    /// Expert that hands over to `RandomRepeat(n)` while solved and takes
    /// back control once the task becomes unsolved.
    Mixed(usize),
}

impl Policy {
    pub fn tag(self) -> PolicyTag {
        match self {
            Policy::RandomRepeat(_) => PolicyTag::Random,
            Policy::Expert => PolicyTag::Expert,
            Policy::Mixed(_) => PolicyTag::Mixed,
        }
    }
}

struct RandomActor {
    repeat: usize,
    current: Option<Action>,
    left: usize,
}

impl RandomActor {
    fn new(repeat: usize) -> Self {
        RandomActor {
            repeat: repeat.max(1),
            current: None,
            left: 0,
        }
    }

    fn reset(&mut self) {
        self.current = None;
        self.left = 0;
    }

    fn act<R: Rng>(&mut self, rng: &mut R) -> Action {
        if self.left == 0 || self.current.is_none() {
            self.current = Some(Action {
                dtcp: [0; 3].map(|_| rng.random_range(-MAX_STEP..MAX_STEP)),
                grip: rng.random_bool(0.5),
            });
            self.left = self.repeat;
        }
        self.left -= 1;
        self.current.unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub policy: Policy,
    pub seed: u64,
    pub states: Vec<LatentState>,
    pub rewards: Vec<f64>,
}

/// Rolls out one episode of at most `horizon` recorded states.
pub fn rollout(task: &SynthTask, policy: Policy, horizon: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = match policy {
        Policy::RandomRepeat(_) => task.scattered_state(&mut rng),
        _ => task.initial_state(&mut rng),
    };
    let repeat = match policy {
        Policy::RandomRepeat(n) | Policy::Mixed(n) => n,
        Policy::Expert => 1,
    };
    let mut random = RandomActor::new(repeat);
    let mut states = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let r = task.reward(&state);
        states.push(state);
        rewards.push(r);
        let solved = r > SOLVED_THRESHOLD;
        if t + 1 == horizon || (policy == Policy::Expert && solved) {
            break;
        }
        let action = match policy {
            Policy::RandomRepeat(_) => random.act(&mut rng),
            Policy::Expert => task.expert_action(&state),
            Policy::Mixed(_) => {
                if solved {
                    random.act(&mut rng)
                } else {
                    random.reset();
                    task.expert_action(&state)
                }
            }
        };
        state = step_dynamics(&state, &action);
    }
    Episode {
        policy,
        seed,
        states,
        rewards,
    }
}

/// `episodes` independent rollouts with seeds derived from `seed`.
pub fn generate_trajectories(
    task: &SynthTask,
    policy: Policy,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    Ok((0..episodes)
        .map(|e| rollout(task, policy, horizon, derive_seed(seed, &[e as u64])))
        .collect())
}

/// SplitMix64 finalizer over a seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Fixed random feature maps, one `token_dim × AUGMENTED_DIM` matrix per
/// (view, token).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthEncoder {
    pub num_views: usize,
    pub tokens_per_view: usize,
    pub token_dim: usize,
    /// `[view][token][dim][feature]`
    weights: Vec<f64>,
    /// `[view][token][dim]`
    biases: Vec<f64>,
    pub noise_sigma: f64,
    pub occlusion_rate: f64,
    /// Views that can see the object at all.
    pub object_views: Vec<bool>,
    pub seed: u64,
}

impl SynthEncoder {
    pub fn new(
        seed: u64,
        num_views: usize,
        tokens_per_view: usize,
        token_dim: usize,
        noise_sigma: f64,
        occlusion_rate: f64,
        object_views: Vec<bool>,
    ) -> Result<Self> {
        if noise_sigma < 0.0 || !(0.0..=1.0).contains(&occlusion_rate) {
            return Err(Error::Config("noise_sigma must be ≥ 0 and occlusion_rate in [0, 1]".into()));
        }
        if object_views.len() != num_views {
            return Err(Error::dim("object_views", num_views, object_views.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_dist = Normal::new(0.0, 2.0 / (AUGMENTED_DIM as f64).sqrt()).unwrap();
        let n = num_views * tokens_per_view * token_dim;
        let weights = (0..n * AUGMENTED_DIM).map(|_| w_dist.sample(&mut rng)).collect();
        let biases = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        Ok(SynthEncoder {
            num_views,
            tokens_per_view,
            token_dim,
            weights,
            biases,
            noise_sigma,
            occlusion_rate,
            object_views,
            seed,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample_len(&self) -> usize {
        self.num_views * self.tokens_per_view * self.token_dim
    }

    /// Encodes one view. Occlusion hides the object (and every relative
    /// vector involving it) from this view.
    pub fn encode<R: Rng>(&self, state: &LatentState, view: usize, rng: &mut R) -> Result<Vec<f32>> {
        if view >= self.num_views {
            return Err(Error::dim("view index", format!("< {}", self.num_views), view));
        }
        let occluded = !self.object_views[view] || (self.occlusion_rate > 0.0 && rng.random_bool(self.occlusion_rate));
        let features = augment(state, occluded);
        let per_view = self.tokens_per_view * self.token_dim;
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let mut out = Vec::with_capacity(per_view);
        for k in 0..per_view {
            let unit = view * per_view + k;
            let w = &self.weights[unit * AUGMENTED_DIM..(unit + 1) * AUGMENTED_DIM];
            let pre: f64 = w.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>() + self.biases[unit];
            let eps = if self.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            out.push((pre.tanh() + eps) as f32);
        }
        Ok(out)
    }

    /// All views concatenated in `[view][token][dim]` order.
    pub fn encode_sample<R: Rng>(&self, state: &LatentState, rng: &mut R) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.sample_len());
        for v in 0..self.num_views {
            out.extend(self.encode(state, v, rng)?);
        }
        Ok(out)
    }
}

/// `[tcp, object, target, grip, tcp − object, object − target]`, with the
/// object terms zeroed when occluded.
pub fn augment(state: &LatentState, occluded: bool) -> [f64; AUGMENTED_DIM] {
    let mut f = [0.0; AUGMENTED_DIM];
    f[0..3].copy_from_slice(&state.tcp);
    f[6..9].copy_from_slice(&state.target);
    f[9] = state.grip;
    if !occluded {
        f[3..6].copy_from_slice(&state.object);
        f[10..13].copy_from_slice(&sub(state.tcp, state.object));
        f[13..16].copy_from_slice(&sub(state.object, state.target));
    }
    f
}

/// Every `gen-data` parameter; recorded verbatim in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub tasks: usize,
    /// Emit a reverse variant for every task family.
    pub variants: bool,
    /// Episodes per (family, variant).
    pub episodes: usize,
    pub horizon: usize,
    pub action_repeat: usize,
    /// Policies assigned to episodes round-robin.
    pub policies: Vec<PolicyTag>,
    pub num_views: usize,
    pub tokens_per_view: usize,
    pub token_dim: usize,
    pub goal_dim: usize,
    pub paraphrases: usize,
    pub heldout_paraphrases: usize,
    /// Relative norm of paraphrase perturbations.
    pub paraphrase_scale: f64,
    pub noise_sigma: f64,
    pub occlusion_rate: f64,
    /// Views that observe the object; empty means all.
    pub object_views: Vec<usize>,
    /// Family whose reverse variant is excluded from training.
    pub holdout_reverse: Option<usize>,
    /// Seeds the encoder, goal vectors and layouts.
    pub world_seed: u64,
    /// Seeds the episodes.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tasks: 4,
            variants: true,
            episodes: 40,
            horizon: 60,
            action_repeat: 5,
            policies: vec![PolicyTag::Random, PolicyTag::Expert, PolicyTag::Mixed],
            num_views: 2,
            tokens_per_view: 16,
            token_dim: 32,
            goal_dim: 32,
            paraphrases: 4,
            heldout_paraphrases: 1,
            paraphrase_scale: 0.05,
            noise_sigma: 0.01,
            occlusion_rate: 0.0,
            object_views: Vec::new(),
            holdout_reverse: None,
            world_seed: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("episodes", self.episodes),
            ("horizon", self.horizon),
            ("action_repeat", self.action_repeat),
            ("num_views", self.num_views),
            ("tokens_per_view", self.tokens_per_view),
            ("token_dim", self.token_dim),
            ("goal_dim", self.goal_dim),
            ("paraphrases", self.paraphrases),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.heldout_paraphrases >= self.paraphrases {
            return Err(Error::Config("at least one paraphrase must remain for training".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("policy list is empty".into()));
        }
        if !(0.0..=0.1).contains(&self.paraphrase_scale) {
            return Err(Error::Config("paraphrase_scale must lie in [0, 0.1]".into()));
        }
        if let Some(&v) = self.object_views.iter().find(|&&v| v >= self.num_views) {
            return Err(Error::Config(format!("object view {v} out of range")));
        }
        if let Some(f) = self.holdout_reverse {
            if !self.variants || f >= self.tasks {
                return Err(Error::Config(format!("cannot hold out reverse variant of family {f}")));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            num_views: self.num_views,
            tokens_per_view: self.tokens_per_view,
            token_dim: self.token_dim,
            goal_dim: self.goal_dim,
        }
    }

    pub fn encoder_seed(&self) -> u64 {
        derive_seed(self.world_seed, &[0xE1C0])
    }

    fn object_view_mask(&self) -> Vec<bool> {
        if self.object_views.is_empty() {
            vec![true; self.num_views]
        } else {
            (0..self.num_views).map(|v| self.object_views.contains(&v)).collect()
        }
    }

    pub fn policy_for(&self, tag: PolicyTag) -> Policy {
        match tag {
            PolicyTag::Random => Policy::RandomRepeat(self.action_repeat),
            PolicyTag::Expert => Policy::Expert,
            PolicyTag::Mixed => Policy::Mixed(self.action_repeat),
        }
    }
}

/// A fully instantiated world: shared encoder plus all task variants.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub encoder: SynthEncoder,
    pub tasks: Vec<SynthTask>,
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let encoder = SynthEncoder::new(
            config.encoder_seed(),
            config.num_views,
            config.tokens_per_view,
            config.token_dim,
            config.noise_sigma,
            config.occlusion_rate,
            config.object_view_mask(),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.world_seed, &[0x60A1]));
        let unit = Normal::new(0.0, 1.0).unwrap();
        let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..config.goal_dim).map(|_| unit.sample(rng)).collect() };
        let variants: &[Variant] = if config.variants {
            &[Variant::Forward, Variant::Reverse]
        } else {
            &[Variant::Forward]
        };
        let mut tasks = Vec::new();
        for family in 0..config.tasks {
            let angle = std::f64::consts::TAU * family as f64 / config.tasks as f64 + std::f64::consts::FRAC_PI_4;
            let target_center = [0.3 * angle.cos(), 0.3 * angle.sin(), -0.1 * (family % 2) as f64];
            let family_vec = gaussian(&mut rng);
            for &variant in variants {
                let variant_vec = gaussian(&mut rng);
                let base: Vec<f64> = family_vec.iter().zip(&variant_vec).map(|(a, b)| a + b).collect();
                let base_norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
                let prompt_embeddings = (0..config.paraphrases)
                    .map(|_| {
                        let d = gaussian(&mut rng);
                        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        let s = config.paraphrase_scale * base_norm / dn;
                        base.iter().zip(&d).map(|(b, e)| b + s * e).collect()
                    })
                    .collect();
                tasks.push(SynthTask {
                    id: tasks.len(),
                    family,
                    variant,
                    target_center,
                    prompt_embeddings,
                    encoder_seed: encoder.seed,
                });
            }
        }
        Ok(SynthWorld { config, encoder, tasks })
    }

    /// Rebuilds the world that generated a dataset from its manifest record.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let config: SynthConfig = serde_json::from_value(manifest.generation.clone())
            .map_err(|e| Error::Config(format!("manifest has no synthetic generation record: {e}")))?;
        SynthWorld::new(config)
    }

    pub fn task(&self, family: usize, variant: Variant) -> Option<&SynthTask> {
        self.tasks.iter().find(|t| t.family == family && t.variant == variant)
    }

    /// Generates and encodes the full dataset.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let cfg = &self.config;
        let geometry = cfg.geometry();
        let mut goal_data = Vec::new();
        let mut task_entries = Vec::new();
        let mut trajectories = Vec::new();
        for task in &self.tasks {
            let mut prompts = Vec::new();
            for (k, e) in task.prompt_embeddings.iter().enumerate() {
                let embedding_id = goal_data.len() / cfg.goal_dim;
                goal_data.extend(e.iter().map(|&v| v as f32));
                prompts.push(PromptEntry {
                    text: prompt_text(task, k),
                    embedding_id,
                    heldout: k >= cfg.paraphrases - cfg.heldout_paraphrases,
                });
            }

            let mut raw_all = Vec::new();
            let first_traj = trajectories.len();
            for e in 0..cfg.episodes {
                let tag = cfg.policies[e % cfg.policies.len()];
                // Random episodes are shared by the variants of a family.
                let seed = if tag == PolicyTag::Random {
                    derive_seed(cfg.seed, &[0x5A, task.family as u64, e as u64])
                } else {
                    derive_seed(cfg.seed, &[task.id as u64, e as u64])
                };
                let ep = rollout(task, cfg.policy_for(tag), cfg.horizon, seed);
                let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE4C]));
                let mut embeddings = Vec::with_capacity(ep.states.len() * geometry.sample_len());
                let mut steps = Vec::with_capacity(ep.states.len());
                for (i, (s, &r)) in ep.states.iter().zip(&ep.rewards).enumerate() {
                    embeddings.extend(self.encoder.encode_sample(s, &mut enc_rng)?);
                    steps.push(StepMeta {
                        step_index: i,
                        reward_raw: r,
                        cartesian: s.tcp,
                        success: u8::from(r > SOLVED_THRESHOLD),
                    });
                    raw_all.push(r);
                }
                let id = trajectories.len();
                trajectories.push(Trajectory {
                    entry: TrajectoryEntry {
                        id,
                        task_id: task.id,
                        policy: tag,
                        meta_file: format!("traj_{id}.meta.jsonl"),
                        emb_file: format!("traj_{id}.emb"),
                        n_steps: steps.len(),
                        seed,
                    },
                    steps,
                    embeddings,
                });
            }
            let name = format!("family{}-{}", task.family, task.variant.as_str());
            let (_, range) = normalize_rewards(&name, &raw_all)?;
            debug_assert!(trajectories[first_traj..].iter().all(|t| t.entry.task_id == task.id));
            task_entries.push(TaskEntry {
                id: task.id,
                name,
                family: task.family,
                variant: task.variant.as_str().to_string(),
                train: !(task.variant == Variant::Reverse && cfg.holdout_reverse == Some(task.family)),
                prompts,
                reward_min: range.min,
                reward_max: range.max,
            });
        }
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            geometry,
            view_configs: vec!["default".into()],
            tasks: task_entries,
            trajectories: trajectories.iter().map(|t| t.entry.clone()).collect(),
            generation: serde_json::to_value(cfg)?,
        };
        let dataset = Dataset {
            manifest,
            goals: GoalTable {
                dim: cfg.goal_dim,
                data: goal_data,
            },
            trajectories,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

fn prompt_text(task: &SynthTask, k: usize) -> String {
    let verbs = ["place", "put", "move", "bring", "set", "carry"];
    let verb = verbs[k % verbs.len()];
    match task.variant {
        Variant::Forward => format!("{verb} the block onto marker {}", task.family),
        Variant::Reverse => format!("{verb} the block away from marker {}", task.family),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(tcp: Vec3, object: Vec3, target: Vec3) -> LatentState {
        LatentState {
            tcp,
            object,
            target,
            grip: 0.0,
        }
    }

    #[test]
    fn reward_cases() {
        let s = state([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [0.1, 0.2, 0.3]);
        assert_eq!(ground_truth_reward(Variant::Forward, &s), 1.0);
        assert_eq!(ground_truth_reward(Variant::Reverse, &s), 0.0);
    }

    #[test]
    fn horizon_one_is_single_step() {
        let world = SynthWorld::new(SynthConfig::default()).unwrap();
        for p in [Policy::Expert, Policy::Mixed(3), Policy::RandomRepeat(2)] {
            let ep = rollout(&world.tasks[0], p, 1, 3);
            assert_eq!(ep.states.len(), 1);
        }
        assert!(generate_trajectories(&world.tasks[0], Policy::Expert, 1, 0, 0).is_err());
    }

    #[test]
    fn noiseless_encoding_is_deterministic() {
        let enc = SynthEncoder::new(4, 2, 3, 5, 0.0, 0.0, vec![true, true]).unwrap();
        let s = state([0.1, 0.0, 0.0], [0.2, 0.1, 0.0], [0.0, 0.0, 0.0]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(enc.encode_sample(&s, &mut r1).unwrap(), enc.encode_sample(&s, &mut r2).unwrap());
        assert!(enc.encode(&s, 2, &mut r1).is_err());
    }

    #[test]
    fn distinct_encoder_seeds_differ() {
        let a = SynthEncoder::new(1, 1, 2, 3, 0.0, 0.0, vec![true]).unwrap();
        let b = SynthEncoder::new(2, 1, 2, 3, 0.0, 0.0, vec![true]).unwrap();
        let a2 = SynthEncoder::new(1, 1, 2, 3, 0.0, 0.0, vec![true]).unwrap();
        assert_ne!(a.weights(), b.weights());
        assert_eq!(a.weights(), a2.weights());
    }

    #[test]
    fn paraphrases_stay_close_to_base() {
        let world = SynthWorld::new(SynthConfig::default()).unwrap();
        for t in &world.tasks {
            let p = &t.prompt_embeddings;
            assert!(p.len() >= 3);
            let n = p[0].len() as f64;
            let mean: Vec<f64> = (0..p[0].len()).map(|i| p.iter().map(|v| v[i]).sum::<f64>() / p.len() as f64).collect();
            let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in p {
                let d = v.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d <= 0.2 * mean_norm, "paraphrase spread {d} vs norm {mean_norm} (dim {n})");
            }
        }
    }

    #[test]
    fn grasped_object_follows_tcp() {
        let s = state([0.0; 3], [0.01, 0.0, 0.0], [0.3, 0.0, 0.0]);
        let next = step_dynamics(&s, &Action { dtcp: [0.0, 0.05, 0.0], grip: true });
        assert_eq!(next.grip, 1.0);
        assert!((next.object[1] - 0.05).abs() < 1e-15);
        let free = step_dynamics(&s, &Action { dtcp: [0.0, 0.05, 0.0], grip: false });
        assert_eq!(free.object, s.object);
    }
}
