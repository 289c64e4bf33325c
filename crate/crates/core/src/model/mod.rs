//! The scoring function: per-token projection of every view, a FiLM
//! generator driven by the goal embedding, a layer-normalized reward head
//! and a scalar read-out.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Activation, DenseCache, DenseGrads, DenseLayer, FilmParams, LayerSpec, Mlp, MlpCache, Modulation,
    Tensor2, DEFAULT_LEAKY_SLOPE,
};

/// Number of leading head layers that receive FiLM modulation.
pub const FILM_MODULATED_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub proj_dim: usize,
    pub tokens_per_view: usize,
    pub num_views: usize,
    pub head_widths: Vec<usize>,
    pub goal_dim: usize,
    /// Hidden widths of the FiLM generator; its output width is derived.
    pub film_generator_widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full_scale()
    }
}

impl ModelConfig {
    /// ViT-S/16 patch grids of two 512×512 views and 384-d sentence embeddings.
    pub fn full_scale() -> Self {
        ModelConfig {
            token_dim: 384,
            proj_dim: 4,
            tokens_per_view: 1024,
            num_views: 2,
            head_widths: vec![4096, 512, 64, 8],
            goal_dim: 384,
            film_generator_widths: vec![256],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Small geometry used by the synthetic world and the test suites.
    pub fn desk() -> Self {
        ModelConfig {
            token_dim: 32,
            proj_dim: 4,
            tokens_per_view: 16,
            num_views: 2,
            head_widths: vec![64, 32, 16, 8],
            goal_dim: 32,
            film_generator_widths: vec![32],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn head_input_width(&self) -> usize {
        self.proj_dim * self.tokens_per_view * self.num_views
    }

    /// Floats per sample: `num_views × tokens_per_view × token_dim`.
    pub fn sample_len(&self) -> usize {
        self.num_views * self.tokens_per_view * self.token_dim
    }

    pub fn modulated_layers(&self) -> usize {
        FILM_MODULATED_LAYERS.min(self.head_widths.len())
    }

    /// Width of the FiLM generator output: a (γ, β) pair per modulated layer.
    pub fn film_output_width(&self) -> usize {
        2 * self.head_widths[..self.modulated_layers()].iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("token_dim", self.token_dim),
            ("proj_dim", self.proj_dim),
            ("tokens_per_view", self.tokens_per_view),
            ("num_views", self.num_views),
            ("goal_dim", self.goal_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            return Err(Error::Config("head_widths must be nonempty and positive".into()));
        }
        if self.film_generator_widths.contains(&0) {
            return Err(Error::Config("film_generator_widths must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    fn projection_spec(&self) -> LayerSpec {
        LayerSpec {
            in_width: self.token_dim,
            out_width: self.proj_dim,
            has_layernorm: false,
            has_film: false,
            activation: Activation::Identity,
        }
    }

    fn film_generator_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = self.goal_dim;
        for &h in &self.film_generator_widths {
            specs.push(LayerSpec {
                in_width: width,
                out_width: h,
                has_layernorm: false,
                has_film: false,
                activation: Activation::LeakyRelu(self.leaky_slope),
            });
            width = h;
        }
        specs.push(LayerSpec {
            in_width: width,
            out_width: self.film_output_width(),
            has_layernorm: false,
            has_film: false,
            activation: Activation::Identity,
        });
        specs
    }

    fn head_specs(&self) -> Vec<LayerSpec> {
        let modulated = self.modulated_layers();
        let mut width = self.head_input_width();
        self.head_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let spec = LayerSpec {
                    in_width: width,
                    out_width: w,
                    has_layernorm: true,
                    has_film: i < modulated,
                    activation: Activation::LeakyRelu(self.leaky_slope),
                };
                width = w;
                spec
            })
            .collect()
    }

    fn scalar_out_spec(&self) -> LayerSpec {
        LayerSpec {
            in_width: *self.head_widths.last().expect("validated nonempty"),
            out_width: 1,
            has_layernorm: false,
            has_film: false,
            activation: Activation::Identity,
        }
    }
}

/// A goal-description embedding; `id` is the prompt's row in the goal table.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalEmbedding {
    pub id: usize,
    pub vector: Vec<f64>,
}

/// All trainable tensors of the scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub config: ModelConfig,
    /// Token projection shared by every token of every view.
    pub projection: DenseLayer,
    pub film_generator: Mlp,
    pub head: Mlp,
    pub scalar_out: DenseLayer,
}

pub struct ForwardCache {
    batch: usize,
    projection: DenseCache,
    film_generator: MlpCache,
    modulations: Vec<Modulation>,
    head: MlpCache,
    scalar_out: DenseCache,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub projection: DenseGrads,
    pub film_generator: Vec<DenseGrads>,
    pub head: Vec<DenseGrads>,
    pub scalar_out: DenseGrads,
}

impl ModelGrads {
    /// Gradient slices in the same order as [`RewardModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.projection.slices();
        out.extend(self.film_generator.iter().flat_map(|g| g.slices()));
        out.extend(self.head.iter().flat_map(|g| g.slices()));
        out.extend(self.scalar_out.slices());
        out
    }
}

impl RewardModel {
    /// Glorot-initialized model whose FiLM generator starts at identity
    /// modulation (γ = 1, β = 0 for every goal).
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let projection = DenseLayer::init(config.projection_spec(), rng)?;
        let mut film_generator = Mlp::init(&config.film_generator_specs(), rng)?;
        let last = film_generator.layers.last_mut().expect("at least one generator layer");
        last.weight.data_mut().fill(0.0);
        let mut offset = 0;
        for &w in &config.head_widths[..config.modulated_layers()] {
            last.bias[offset..offset + w].fill(1.0);
            last.bias[offset + w..offset + 2 * w].fill(0.0);
            offset += 2 * w;
        }
        let head = Mlp::init(&config.head_specs(), rng)?;
        let scalar_out = DenseLayer::init(config.scalar_out_spec(), rng)?;
        Ok(RewardModel {
            config,
            projection,
            film_generator,
            head,
            scalar_out,
        })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.projection.params();
        out.extend(self.film_generator.params());
        out.extend(self.head.params());
        out.extend(self.scalar_out.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.projection.params_mut();
        out.extend(self.film_generator.params_mut());
        out.extend(self.head.params_mut());
        out.extend(self.scalar_out.params_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_sample(&self, sample: &[f32]) -> Result<()> {
        let c = &self.config;
        if sample.len() != c.sample_len() {
            let per_view = c.tokens_per_view * c.token_dim;
            return Err(Error::dim(
                "sample views",
                format!(
                    "{} views × {} tokens × {} dims = {}",
                    c.num_views,
                    c.tokens_per_view,
                    c.token_dim,
                    c.sample_len()
                ),
                format!("{} values ({:.2} views)", sample.len(), sample.len() as f64 / per_view as f64),
            ));
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
        Ok(())
    }

    fn check_goal(&self, goal: &[f64]) -> Result<()> {
        if goal.len() != self.config.goal_dim {
            return Err(Error::dim("goal embedding", self.config.goal_dim, goal.len()));
        }
        if goal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite goal embedding value".into()));
        }
        Ok(())
    }

    /// Packs samples into a `(batch·views·tokens) × token_dim` token matrix
    /// and goals into a `batch × goal_dim` matrix.
    pub fn pack_inputs(&self, samples: &[&[f32]], goals: &[&[f64]]) -> Result<(Tensor2, Tensor2)> {
        if samples.len() != goals.len() {
            return Err(Error::dim("score_batch goals", samples.len(), goals.len()));
        }
        let c = &self.config;
        let mut tokens = Vec::with_capacity(samples.len() * c.sample_len());
        let mut goal_data = Vec::with_capacity(goals.len() * c.goal_dim);
        for (s, g) in samples.iter().zip(goals) {
            self.check_sample(s)?;
            self.check_goal(g)?;
            tokens.extend(s.iter().map(|&v| v as f64));
            goal_data.extend_from_slice(g);
        }
        let rows = samples.len() * c.num_views * c.tokens_per_view;
        Ok((
            Tensor2::from_vec(rows, c.token_dim, tokens)?,
            Tensor2::from_vec(goals.len(), c.goal_dim, goal_data)?,
        ))
    }

    fn split_film(&self, film_out: &Tensor2) -> Vec<Modulation> {
        let mut offset = 0;
        self.config.head_widths[..self.config.modulated_layers()]
            .iter()
            .map(|&w| {
                let m = Modulation {
                    gamma: film_out.column_slice(offset, w),
                    beta: film_out.column_slice(offset + w, w),
                };
                offset += 2 * w;
                m
            })
            .collect()
    }

    fn film_slots<'a>(&self, mods: &'a [Modulation]) -> Vec<Option<&'a Modulation>> {
        (0..self.head.layers.len()).map(|i| mods.get(i)).collect()
    }

    /// Batched forward pass over packed inputs, keeping every cache needed
    /// by [`RewardModel::backward`].
    pub fn forward(&self, tokens: &Tensor2, goals: &Tensor2) -> Result<(Vec<f64>, ForwardCache)> {
        let c = &self.config;
        let batch = goals.rows();
        if tokens.rows() != batch * c.num_views * c.tokens_per_view {
            return Err(Error::dim(
                "token matrix rows",
                batch * c.num_views * c.tokens_per_view,
                tokens.rows(),
            ));
        }
        let (projected, projection) = self.projection.forward(tokens, None)?;
        let head_in = projected.reshape(batch, c.head_input_width())?;
        let gen_slots = vec![None; self.film_generator.layers.len()];
        let (film_out, film_generator) = self.film_generator.forward(goals, &gen_slots)?;
        let modulations = self.split_film(&film_out);
        let slots = self.film_slots(&modulations);
        let (features, head) = self.head.forward(&head_in, &slots)?;
        let (out, scalar_out) = self.scalar_out.forward(&features, None)?;
        let scores = out.into_vec();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok((
            scores,
            ForwardCache {
                batch,
                projection,
                film_generator,
                modulations,
                head,
                scalar_out,
            },
        ))
    }

    /// Gradients of a scalar loss given `dloss/dscore` for every row.
    pub fn backward(&self, cache: &ForwardCache, dscores: &[f64]) -> Result<ModelGrads> {
        if dscores.len() != cache.batch {
            return Err(Error::Contract(format!(
                "{} score gradients for a batch of {}",
                dscores.len(),
                cache.batch
            )));
        }
        let c = &self.config;
        let up = Tensor2::from_vec(cache.batch, 1, dscores.to_vec())?;
        let (scalar_out, _, dfeatures) = self.scalar_out.backward(&cache.scalar_out, &up, None)?;
        let slots = self.film_slots(&cache.modulations);
        let head = self.head.backward(&cache.head, &dfeatures, &slots)?;

        let mut dfilm = Tensor2::zeros(cache.batch, c.film_output_width());
        let mut offset = 0;
        for (fg, &w) in head.film.iter().zip(&c.head_widths[..c.modulated_layers()]) {
            let fg = fg.as_ref().ok_or_else(|| Error::Contract("missing FiLM gradient".into()))?;
            dfilm.write_columns(offset, &fg.gamma);
            dfilm.write_columns(offset + w, &fg.beta);
            offset += 2 * w;
        }
        let gen_slots = vec![None; self.film_generator.layers.len()];
        let film_generator = self.film_generator.backward(&cache.film_generator, &dfilm, &gen_slots)?;

        let dprojected = head
            .input
            .reshape(cache.batch * c.num_views * c.tokens_per_view, c.proj_dim)?;
        let (projection, _, _) = self.projection.backward(&cache.projection, &dprojected, None)?;
        Ok(ModelGrads {
            projection,
            film_generator: film_generator.layers,
            head: head.layers,
            scalar_out,
        })
    }

    /// FiLM coefficients for each modulated head layer.
    pub fn film_generate(&self, goal: &GoalEmbedding) -> Result<Vec<FilmParams>> {
        self.check_goal(&goal.vector)?;
        let g = Tensor2::from_vec(1, self.config.goal_dim, goal.vector.clone())?;
        let slots = vec![None; self.film_generator.layers.len()];
        let (out, _) = self.film_generator.forward(&g, &slots)?;
        Ok(self
            .split_film(&out)
            .into_iter()
            .map(|m| FilmParams {
                gamma: m.gamma.into_vec(),
                beta: m.beta.into_vec(),
            })
            .collect())
    }

    pub fn score(&self, sample: &[f32], goal: &GoalEmbedding) -> Result<f64> {
        Ok(self.score_batch(&[sample], &[goal.vector.as_slice()])?[0])
    }

    /// Scores a batch; row `i` is bit-identical to scoring sample `i` alone.
    pub fn score_batch(&self, samples: &[&[f32]], goals: &[&[f64]]) -> Result<Vec<f64>> {
        let (tokens, goal_mat) = self.pack_inputs(samples, goals)?;
        Ok(self.forward(&tokens, &goal_mat)?.0)
    }

    /// Like [`RewardModel::score_batch`], sharding rows across the rayon pool
    /// and gathering in input order.
    pub fn score_batch_parallel(&self, samples: &[&[f32]], goals: &[&[f64]], chunk: usize) -> Result<Vec<f64>> {
        if samples.len() != goals.len() {
            return Err(Error::dim("score_batch goals", samples.len(), goals.len()));
        }
        let chunk = chunk.max(1);
        let parts: Vec<Result<Vec<f64>>> = samples
            .par_chunks(chunk)
            .zip(goals.par_chunks(chunk))
            .map(|(s, g)| self.score_batch(s, g))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Copy with every parameter rounded through `f32`.
    pub fn narrowed(&self) -> RewardModel {
        let mut m = self.clone();
        for p in m.params_mut() {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        m
    }
}
