//! Ego-centric scene relations: path-relevance selection over segmented
//! entities, a gated multi-cue pair descriptor, a knowledge prior
//! aggregator, and the mechanism / side / severity heads.

mod model;
mod prior;
mod sample;
pub mod synth;
#[cfg(test)]
mod tests;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{mechanism_logits, select_relevant, Descriptor, EresOutput, HeadOutput, SceneDims, SceneModel};
pub use prior::KnowledgePrior;
pub use sample::{
    compute_geometry, load_dir, masked_pool, round_f32, Entity, EntityLabels, FeatureMap, Mask, RelationLabel,
    SceneInputs, SceneSample, POOL_EPS,
};
pub use train::{
    batch_loss, class_weights, evaluate_scenes, predict, run_ablations, train_scene, AblationReport, EntityPrediction,
    LossWeights, SceneEval, ScenePrediction, SceneTrainReport, SEVERITY_GRADES,
};

use crate::metrics::MetricsError;
use crate::tensor::TensorError;

pub const MECHANISMS: [&str; 8] = [
    "control",
    "edge_proximity",
    "fixed_object_near_edge",
    "head_on",
    "intersection",
    "rear_end",
    "sideswipe",
    "cross_traffic_conflict",
];

pub const SIDES: [&str; 3] = ["left", "front", "right"];

pub const SEVERITIES: [&str; 4] = ["info", "caution", "imminent", "relevant_but_not_critical"];

pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic_light",
    "traffic_sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Severity-related node groups attended by the prior aggregator.
pub const PRIOR_GROUPS: [&str; 7] = ["CAIS", "VAIS", "MAIS", "DAMSEV", "CONSEQ", "TREATMENT", "ROLLINITYP"];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Width of each descriptor block.
    pub d_pair: usize,
    /// Per-group prior projection width.
    pub d_prior: usize,
    pub eres_heads: usize,
    pub prior_heads: usize,
    pub epochs: usize,
    /// Fraction of epochs with only the relevance loss active.
    pub warmup_frac: f64,
    pub lambda_eres: f64,
    pub focal_gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Scenes per optimizer step.
    pub batch_scenes: usize,
    pub seed: u64,
    /// Feed bridge embeddings and severity priors.
    pub use_kge: bool,
    /// Select entities by relevance; otherwise every entity passes.
    pub use_eres: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            d_pair: 16,
            d_prior: 8,
            eres_heads: 2,
            prior_heads: 4,
            epochs: 30,
            warmup_frac: 0.2,
            lambda_eres: 0.1,
            focal_gamma: 2.0,
            lr: 3e-3,
            weight_decay: 0.0,
            batch_scenes: 8,
            seed: 0,
            use_kge: true,
            use_eres: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::Config(m.into()));
        if self.d_pair == 0 || self.d_prior == 0 {
            return bad("descriptor and prior widths must be positive");
        }
        if self.eres_heads == 0 || self.prior_heads == 0 {
            return bad("attention head counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !(self.lambda_eres >= 0.0 && self.focal_gamma >= 0.0 && self.weight_decay >= 0.0) {
            return bad("loss weights, focal gamma and weight decay must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_scenes == 0 {
            return bad("batch_scenes must be positive");
        }
        Ok(())
    }

    pub fn warmup_epochs(&self) -> usize {
        (self.warmup_frac * self.epochs as f64).round() as usize
    }
}
