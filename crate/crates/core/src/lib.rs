//! Pairwise-preference reward models over frozen patch embeddings.
//!
//! The crate covers the whole loop: a synthetic embedding world with
//! analytic ground-truth rewards, a dataset container, a FiLM-conditioned
//! reward head trained with a pairwise logistic loss, ranking and
//! calibration metrics, and potential-based reward shaping on gridworlds.

// Guards like `!(x > 0.0)` deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod shaping;
pub mod synth;
pub mod train;

pub use calibration::CalibrationMap;
pub use data::{DataConfig, Dataset, StepRecord, TrainingPair};
pub use error::{Error, Result};
pub use metrics::{MetricsReport, ReliabilityBins, StratifiedAccuracy};
pub use model::{GoalEmbedding, ModelConfig, RewardModel};
pub use nn::Tensor2;
