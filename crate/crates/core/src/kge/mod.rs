//! Literal-aware, qualifier-modulated knowledge graph embedding with a
//! transformer triplet scorer, 1-to-N training and filtered evaluation.

mod eval;
mod literals;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eval::{evaluate, final_states, Embeddings};
pub use literals::LiteralTable;
pub use model::{KgeModel, MessageGraph, MpLayer};
pub use train::{train, train_step_loss, TrainReport};

use crate::tensor::TensorError;
use crate::triplets::TripletError;

#[derive(Debug, Error)]
pub enum KgeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("embedding file error: {0}")]
    Embeddings(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Triplets(#[from] TripletError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = KgeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgeConfig {
    pub dim: usize,
    /// Message-passing layers.
    pub layers: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    /// Label smoothing θ.
    pub smoothing: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Query groups per direction per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Divide aggregated messages by the in-degree.
    pub degree_norm: bool,
    pub eval_batch: usize,
}

impl Default for KgeConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 1,
            heads: 4,
            encoder_layers: 1,
            smoothing: 0.01,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            degree_norm: false,
            eval_batch: 256,
        }
    }
}

impl KgeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KgeError::Config(m.to_owned()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.layers == 0 {
            return bad("at least one message-passing layer is required");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.encoder_layers == 0 {
            return bad("at least one encoder layer is required");
        }
        if !(0.0..0.5).contains(&self.smoothing) {
            return bad("smoothing must lie in [0, 0.5)");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive");
        }
        Ok(())
    }
}
