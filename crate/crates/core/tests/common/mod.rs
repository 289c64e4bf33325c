#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rewardrank_core::{ModelConfig, RewardModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        token_dim: 3,
        proj_dim: 2,
        tokens_per_view: 2,
        num_views: 2,
        head_widths: vec![6, 5, 4, 3],
        goal_dim: 3,
        film_generator_widths: vec![4],
        leaky_slope: 0.01,
    }
}

/// A model with every parameter perturbed away from its initial value, so
/// the FiLM generator, biases and layer-norm affines are all active.
pub fn scrambled_model(config: ModelConfig, seed: u64) -> RewardModel {
    let mut r = rng(seed);
    let mut m = RewardModel::init(config, &mut r).unwrap();
    for p in m.params_mut() {
        for v in p.iter_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    m
}

pub fn random_sample(config: &ModelConfig, r: &mut impl Rng) -> Vec<f32> {
    (0..config.sample_len()).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

pub fn random_goal(config: &ModelConfig, r: &mut impl Rng) -> Vec<f64> {
    (0..config.goal_dim).map(|_| r.random_range(-1.0..1.0)).collect()
}
