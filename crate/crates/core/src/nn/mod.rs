//! Dense-network substrate with explicit forward and backward passes.

mod layers;
mod optim;
mod tensor;

pub use layers::{
    film_forward, film_forward_rows, glorot_bound, layernorm_forward, linear_forward, Activation,
    DenseCache, DenseGrads, DenseLayer, FilmParams, LayerNormCache, LayerSpec, Mlp, MlpCache,
    MlpGrads, Modulation, DEFAULT_LEAKY_SLOPE, LAYERNORM_EPS,
};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tensor::Tensor2;
