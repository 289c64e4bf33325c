//! Potential-based reward shaping on deterministic gridworlds: exact value
//! iteration for invariance checks and tabular Q-learning for speed studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GoalEmbedding, RewardModel};
use crate::synth::{derive_seed, LatentState, SynthEncoder, SynthTask, SynthWorld, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Right,
    Down,
    Left,
}

/// Fixed order, also the greedy tie-break order.
pub const ACTIONS: [Action; 4] = [Action::Up, Action::Right, Action::Down, Action::Left];

pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldMDP {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    pub step_cost: f64,
    pub goal_reward: f64,
    pub gamma: f64,
}

impl GridworldMDP {
    /// Sparse grid with the start and goal in opposite corners.
    pub fn corners(width: usize, height: usize) -> Result<Self> {
        let mdp = GridworldMDP {
            width,
            height,
            start: (0, 0),
            goal: (width.saturating_sub(1), height.saturating_sub(1)),
            step_cost: 0.0,
            goal_reward: 1.0,
            gamma: 0.95,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("grid must be non-empty".into()));
        }
        let inside = |c: Cell| c.0 < self.width && c.1 < self.height;
        if !inside(self.start) || !inside(self.goal) {
            return Err(Error::Config("start and goal must lie inside the grid".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("discount must lie in (0, 1), got {}", self.gamma)));
        }
        if !self.step_cost.is_finite() || !self.goal_reward.is_finite() {
            return Err(Error::Numeric("non-finite reward parameters".into()));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    pub fn cell(&self, s: usize) -> Cell {
        (s % self.width, s / self.width)
    }

    pub fn goal_state(&self) -> usize {
        self.index(self.goal)
    }

    pub fn start_state(&self) -> usize {
        self.index(self.start)
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        s == self.goal_state()
    }

    /// Deterministic move; walls leave the agent in place and the goal
    /// absorbs.
    pub fn next(&self, s: usize, a: Action) -> usize {
        if self.is_terminal(s) {
            return s;
        }
        let (x, y) = self.cell(s);
        let c = match a {
            Action::Up if y > 0 => (x, y - 1),
            Action::Right if x + 1 < self.width => (x + 1, y),
            Action::Down if y + 1 < self.height => (x, y + 1),
            Action::Left if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        self.index(c)
    }

    pub fn base_reward(&self, s: usize, s_next: usize) -> f64 {
        if self.is_terminal(s) {
            0.0
        } else if self.is_terminal(s_next) {
            self.goal_reward
        } else {
            -self.step_cost
        }
    }

    pub fn manhattan(&self, s: usize) -> usize {
        let (x, y) = self.cell(s);
        x.abs_diff(self.goal.0) + y.abs_diff(self.goal.1)
    }
}

/// State potential; analytic or a precomputed table (e.g. learned scores).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PotentialFn {
    /// `φ(s) = offset − manhattan(s, goal) / scale`
    NegManhattan {
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
    Table(Vec<f64>),
}

impl PotentialFn {
    pub fn values(&self, mdp: &GridworldMDP) -> Result<Vec<f64>> {
        let v: Vec<f64> = match self {
            PotentialFn::NegManhattan { scale, offset } => {
                (0..mdp.num_states()).map(|s| offset - mdp.manhattan(s) as f64 / scale).collect()
            }
            PotentialFn::Table(t) => {
                if t.len() != mdp.num_states() {
                    return Err(Error::dim("potential table", mdp.num_states(), t.len()));
                }
                t.clone()
            }
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("potential is not finite".into()));
        }
        Ok(v)
    }
}

/// `F(s, a, s′) = γ·φ(s′) − φ(s)`.
pub fn shaping_term(phi_s: f64, phi_next: f64, gamma: f64) -> Result<f64> {
    if !phi_s.is_finite() || !phi_next.is_finite() {
        return Err(Error::Numeric("non-finite potential".into()));
    }
    Ok(gamma * phi_next - phi_s)
}

/// `R(s, a, s′) + γ·φ(s′) − φ(s)`.
pub fn shape(base: f64, phi_s: f64, phi_next: f64, gamma: f64) -> Result<f64> {
    Ok(base + shaping_term(phi_s, phi_next, gamma)?)
}

/// Discounted sum of shaping terms along a state sequence.
pub fn discounted_shaping(phis: &[f64], gamma: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut g = 1.0;
    for w in phis.windows(2) {
        total += g * shaping_term(w[0], w[1], gamma)?;
        g *= gamma;
    }
    Ok(total)
}

/// Reward table indexed `[state][action]`.
pub type RewardTable = Vec<[f64; 4]>;

pub fn base_table(mdp: &GridworldMDP) -> RewardTable {
    (0..mdp.num_states())
        .map(|s| ACTIONS.map(|a| mdp.base_reward(s, mdp.next(s, a))))
        .collect()
}

pub fn shaped_table(mdp: &GridworldMDP, phi: &[f64]) -> Result<RewardTable> {
    if phi.len() != mdp.num_states() {
        return Err(Error::dim("potential", mdp.num_states(), phi.len()));
    }
    (0..mdp.num_states())
        .map(|s| {
            let mut row = [0.0; 4];
            for (k, &a) in ACTIONS.iter().enumerate() {
                let n = mdp.next(s, a);
                row[k] = shape(mdp.base_reward(s, n), phi[s], phi[n], mdp.gamma)?;
            }
            Ok(row)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    pub policy: Vec<Action>,
    pub iterations: usize,
}

pub const VALUE_ITERATION_CAP: usize = 1_000_000;
/// Q-values closer than this count as tied for the greedy policy.
pub const GREEDY_TIE_TOL: f64 = 1e-7;

/// Synchronous value iteration to within `tol` of the fixed point. The goal
/// is absorbing, so its self-loop carries whatever the table assigns.
pub fn value_iteration(mdp: &GridworldMDP, rewards: &RewardTable, tol: f64) -> Result<ValueSolution> {
    mdp.validate()?;
    if rewards.len() != mdp.num_states() {
        return Err(Error::dim("reward table", mdp.num_states(), rewards.len()));
    }
    let g = mdp.gamma;
    let n = mdp.num_states();
    let next: Vec<[usize; 4]> = (0..n).map(|s| ACTIONS.map(|a| mdp.next(s, a))).collect();
    let mut v = vec![0.0; n];
    let mut fresh = vec![0.0; n];
    for it in 1..=VALUE_ITERATION_CAP {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            let best = (0..4).map(|k| rewards[s][k] + g * v[next[s][k]]).fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            fresh[s] = best;
        }
        std::mem::swap(&mut v, &mut fresh);
        if !delta.is_finite() {
            return Err(Error::Numeric("value iteration diverged".into()));
        }
        if delta * g / (1.0 - g) < tol {
            let policy = (0..n)
                .map(|s| {
                    let q = [0, 1, 2, 3].map(|k| rewards[s][k] + g * v[next[s][k]]);
                    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    ACTIONS[q.iter().position(|&x| x >= best - GREEDY_TIE_TOL).unwrap()]
                })
                .collect();
            return Ok(ValueSolution {
                values: v,
                policy,
                iterations: it,
            });
        }
        if it == VALUE_ITERATION_CAP {
            return Err(Error::NonConvergence {
                iterations: it,
                delta,
            });
        }
    }
    unreachable!()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub max_steps: usize,
    pub episodes: usize,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            alpha: 0.1,
            epsilon: 0.1,
            epsilon_decay: 0.999,
            max_steps: 500,
            episodes: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub seed: u64,
    /// Behaviour steps taken in each training episode.
    pub steps: Vec<usize>,
    pub success: Vec<bool>,
    /// Whether the greedy policy reaches the goal after each episode.
    pub greedy_success: Vec<bool>,
    /// 1-based episode after which the greedy policy first succeeds.
    pub first_success: Option<usize>,
}

fn greedy_fixed(q: &[f64; 4]) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q.iter().position(|&x| x == best).unwrap()
}

fn greedy_random<R: Rng>(q: &[f64; 4], rng: &mut R) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..4).filter(|&k| q[k] == best).collect();
    ties[rng.random_range(0..ties.len())]
}

/// Deterministic greedy rollout from the start state.
pub fn greedy_reaches_goal(mdp: &GridworldMDP, q: &[[f64; 4]], max_steps: usize) -> bool {
    let mut s = mdp.start_state();
    for _ in 0..max_steps {
        if mdp.is_terminal(s) {
            return true;
        }
        s = mdp.next(s, ACTIONS[greedy_fixed(&q[s])]);
    }
    mdp.is_terminal(s)
}

/// ε-greedy tabular Q-learning; episodes end on reaching the goal.
pub fn q_learning(mdp: &GridworldMDP, rewards: &RewardTable, config: &QConfig, seed: u64) -> Result<LearningCurve> {
    mdp.validate()?;
    if rewards.len() != mdp.num_states() {
        return Err(Error::dim("reward table", mdp.num_states(), rewards.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = vec![[0.0; 4]; mdp.num_states()];
    let mut eps = config.epsilon;
    let mut curve = LearningCurve {
        seed,
        steps: Vec::with_capacity(config.episodes),
        success: Vec::with_capacity(config.episodes),
        greedy_success: Vec::with_capacity(config.episodes),
        first_success: None,
    };
    for episode in 1..=config.episodes {
        let mut s = mdp.start_state();
        let mut steps = 0;
        while steps < config.max_steps && !mdp.is_terminal(s) {
            let k = if rng.random::<f64>() < eps {
                rng.random_range(0..4)
            } else {
                greedy_random(&q[s], &mut rng)
            };
            let n = mdp.next(s, ACTIONS[k]);
            let bootstrap = if mdp.is_terminal(n) {
                0.0
            } else {
                q[n].iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let target = rewards[s][k] + mdp.gamma * bootstrap;
            q[s][k] += config.alpha * (target - q[s][k]);
            s = n;
            steps += 1;
        }
        eps *= config.epsilon_decay;
        curve.steps.push(steps);
        curve.success.push(mdp.is_terminal(s));
        let greedy = greedy_reaches_goal(mdp, &q, config.max_steps);
        curve.greedy_success.push(greedy);
        if greedy && curve.first_success.is_none() {
            curve.first_success = Some(episode);
        }
    }
    Ok(curve)
}

/// Runs one Q-learning curve per seed in parallel, returned in seed order.
pub fn q_learning_study(mdp: &GridworldMDP, rewards: &RewardTable, config: &QConfig, seeds: &[u64]) -> Result<Vec<LearningCurve>> {
    seeds.par_iter().map(|&s| q_learning(mdp, rewards, config, s)).collect()
}

/// Episodes to first greedy success; runs that never succeed count as
/// `episodes + 1`.
pub fn median_first_success(curves: &[LearningCurve], episodes: usize) -> f64 {
    let mut v: Vec<f64> = curves.iter().map(|c| c.first_success.unwrap_or(episodes + 1) as f64).collect();
    v.sort_by(f64::total_cmp);
    crate::metrics::quantile(&v, 0.5).unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCheck {
    pub policy_agreement: f64,
    /// `max_s |V′(s) − (V(s) − φ(s))|`
    pub max_value_residual: f64,
}

/// Compares base and shaped value-iteration solutions on non-terminal states.
pub fn check_invariance(mdp: &GridworldMDP, phi: &[f64], tol: f64) -> Result<InvarianceCheck> {
    let base = value_iteration(mdp, &base_table(mdp), tol)?;
    let shaped = value_iteration(mdp, &shaped_table(mdp, phi)?, tol)?;
    let non_terminal: Vec<usize> = (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    let agree = non_terminal.iter().filter(|&&s| base.policy[s] == shaped.policy[s]).count();
    let residual = (0..mdp.num_states())
        .map(|s| (shaped.values[s] - (base.values[s] - phi[s])).abs())
        .fold(0.0, f64::max);
    Ok(InvarianceCheck {
        policy_agreement: if non_terminal.is_empty() {
            1.0
        } else {
            agree as f64 / non_terminal.len() as f64
        },
        max_value_residual: residual,
    })
}

/// Places grid cells in the synthetic workspace: the goal cell sits on the
/// task target and the object rests there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCoupling {
    pub goal_position: [f64; 3],
    pub spacing: f64,
}

impl GridCoupling {
    pub fn new(mdp: &GridworldMDP, goal_position: [f64; 3]) -> Self {
        let span = (mdp.width.max(mdp.height) - 1).max(1) as f64;
        GridCoupling {
            goal_position,
            spacing: 0.4 / span,
        }
    }

    pub fn latent_state(&self, mdp: &GridworldMDP, s: usize) -> LatentState {
        let (x, y) = mdp.cell(s);
        let dx = (x as f64 - mdp.goal.0 as f64) * self.spacing;
        let dy = (y as f64 - mdp.goal.1 as f64) * self.spacing;
        let g = self.goal_position;
        let tcp = [g[0] + dx, g[1] + dy, g[2]].map(|v| v.clamp(-0.5, 0.5));
        LatentState {
            tcp,
            object: g,
            target: g,
            grip: 0.0,
        }
    }
}

/// Scores every cell's encoding with the reward model and rescales the
/// scores to `[0, 1]`.
pub fn learned_potential<R: Rng>(
    mdp: &GridworldMDP,
    coupling: &GridCoupling,
    model: &RewardModel,
    encoder: &SynthEncoder,
    goal: &GoalEmbedding,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let samples: Vec<Vec<f32>> = (0..mdp.num_states())
        .map(|s| encoder.encode_sample(&coupling.latent_state(mdp, s), rng))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = samples.iter().map(Vec::as_slice).collect();
    let goals = vec![goal.vector.as_slice(); refs.len()];
    let scores = model.score_batch(&refs, &goals)?;
    Ok(rescale_unit(&scores))
}

/// Forward task of `family` and its first paraphrase, narrowed to the
/// stored 32-bit precision.
pub fn forward_goal(world: &SynthWorld, family: usize) -> Result<(&SynthTask, GoalEmbedding)> {
    let task = world
        .task(family, Variant::Forward)
        .ok_or_else(|| Error::Config(format!("no forward task for family {family}")))?;
    let vector = task.prompt_embeddings[0].iter().map(|&v| f64::from(v as f32)).collect();
    Ok((task, GoalEmbedding { id: 0, vector }))
}

/// Learned potential for a grid coupled to the forward task of `family`.
pub fn world_potential(mdp: &GridworldMDP, world: &SynthWorld, model: &RewardModel, family: usize, seed: u64) -> Result<Vec<f64>> {
    let (task, goal) = forward_goal(world, family)?;
    let coupling = GridCoupling::new(mdp, task.target_center);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9F1D, family as u64]));
    learned_potential(mdp, &coupling, model, &world.encoder, &goal, &mut rng)
}

/// Min-max rescaling to `[0, 1]`; constant input maps to zeros.
pub fn rescale_unit(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub probes: usize,
    /// Probes whose greedy policy differs from the base policy somewhere.
    pub diverged_probes: usize,
    /// Mean fraction of non-terminal states with a different action.
    pub mean_state_divergence: f64,
}

/// Partial-observation probe: each transition sees independently drawn
/// observation potentials for its two endpoints, so the shaping term is no
/// longer a difference of a state function.
pub fn observation_divergence<F>(mdp: &GridworldMDP, probes: usize, tol: f64, mut sample_phi: F) -> Result<DivergenceReport>
where
    F: FnMut(usize) -> Result<f64>,
{
    let base = value_iteration(mdp, &base_table(mdp), tol)?;
    let non_terminal: Vec<usize> = (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    let mut diverged_probes = 0;
    let mut fraction_sum = 0.0;
    for _ in 0..probes {
        let mut table = base_table(mdp);
        for (s, row) in table.iter_mut().enumerate() {
            for (k, &a) in ACTIONS.iter().enumerate() {
                let n = mdp.next(s, a);
                row[k] += shaping_term(sample_phi(s)?, sample_phi(n)?, mdp.gamma)?;
            }
        }
        let shaped = value_iteration(mdp, &table, tol)?;
        let differ = non_terminal.iter().filter(|&&s| base.policy[s] != shaped.policy[s]).count();
        diverged_probes += usize::from(differ > 0);
        fraction_sum += differ as f64 / non_terminal.len().max(1) as f64;
    }
    Ok(DivergenceReport {
        probes,
        diverged_probes,
        mean_state_divergence: if probes == 0 { 0.0 } else { fraction_sum / probes as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_chain() {
        let mdp = GridworldMDP {
            width: 2,
            height: 1,
            start: (0, 0),
            goal: (1, 0),
            step_cost: 0.0,
            goal_reward: 1.0,
            gamma: 0.95,
        };
        let sol = value_iteration(&mdp, &base_table(&mdp), 1e-10).unwrap();
        assert_eq!(sol.policy[0], Action::Right);
        // Immediate goal reward of 1 on entry.
        assert!((sol.values[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_and_constant_potential() {
        let mdp = GridworldMDP::corners(4, 3).unwrap();
        assert_eq!(shaped_table(&mdp, &[0.0; 12]).unwrap(), base_table(&mdp));
        assert_eq!(shape(0.3, 2.0, 2.0, 0.9).unwrap(), 0.3 + (0.9 - 1.0) * 2.0);
        assert!(shape(0.0, f64::NAN, 0.0, 0.9).is_err());
    }

    #[test]
    fn walls_absorb_and_goal_is_absorbing() {
        let mdp = GridworldMDP::corners(3, 3).unwrap();
        assert_eq!(mdp.next(0, Action::Up), 0);
        assert_eq!(mdp.next(0, Action::Left), 0);
        let g = mdp.goal_state();
        assert!(ACTIONS.iter().all(|&a| mdp.next(g, a) == g));
    }

    #[test]
    fn adjacent_goal_learned_quickly() {
        let mdp = GridworldMDP {
            width: 2,
            height: 1,
            start: (0, 0),
            goal: (1, 0),
            step_cost: 0.0,
            goal_reward: 1.0,
            gamma: 0.95,
        };
        let curve = q_learning(&mdp, &base_table(&mdp), &QConfig { episodes: 50, ..QConfig::default() }, 7).unwrap();
        assert!(curve.first_success.unwrap() <= 50);
        assert!(*curve.greedy_success.last().unwrap());
    }

    #[test]
    fn rescale_bounds() {
        assert_eq!(rescale_unit(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(rescale_unit(&[1.0, 1.0]), vec![0.0, 0.0]);
    }
}
