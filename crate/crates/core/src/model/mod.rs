//! Masked-reconstruction encoder-decoder for trajectories.
//!
//! Visible points are tokenized (pointwise spatial projection plus a linear
//! embedding of the time gap), encoded by `enc_layers` rotary-attention
//! blocks, scattered back to their original indices with a learned mask
//! token in the hidden slots, decoded by `dec_layers` further blocks and
//! projected to 2-d offsets. Rotary positions are always the original
//! trajectory indices, so the encoder sees the true spacing between visible
//! points.
//!
//! Everything is `f64` with hand-written backward passes; see
//! [`network::gradients`].

pub mod adapt;
pub mod block;
pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod params;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapt::{ClassifierHead, FineTuneMode, Task, TaskModel};
pub use checkpoint::Checkpoint;
pub use network::{
    decode, denormalize, encode, gradients, masked_loss, normalized_targets, reorder_merge, tokenize,
    EmbeddingSequence,
};
pub use params::ModelParams;
pub use train::{train, EpochLoss, TrainOutcome};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("index map inconsistent with sequence: {0}")]
    IndexMapMismatch(String),
    #[error(transparent)]
    Mask(#[from] crate::stm::MaskError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Longest sequence fed to the model; longer ones are cut from the tail.
    pub pad_len: usize,
    pub max_len: usize,
    /// Multiplier applied to degree offsets from the first point.
    pub coord_scale: f64,
    /// Time gaps are clipped to `[0, max_dt_s]` and divided by it before the
    /// temporal embedding.
    pub max_dt_s: f64,
    pub lr: f64,
    /// Final learning rate of the cosine schedule, as a fraction of `lr`.
    pub lr_floor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Interval-resampling steps drawn per trajectory during training.
    pub intervals: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            ffn_mult: 4,
            pad_len: 64,
            max_len: 512,
            coord_scale: 100.0,
            max_dt_s: 60.0,
            lr: 1e-3,
            lr_floor: 0.05,
            batch_size: 32,
            epochs: 50,
            patience: 10,
            val_fraction: 0.1,
            intervals: vec![1, 2, 3, 5],
            seed: 0,
        }
    }

    /// Full-size settings (d=128, 8 encoder and 4 decoder blocks, 4 heads).
    pub fn full() -> Self {
        Self {
            d_model: 128,
            enc_layers: 8,
            dec_layers: 4,
            heads: 4,
            pad_len: 200,
            batch_size: 1024,
            epochs: 200,
            ..Self::desk()
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.heads == 0 || self.d_model == 0 || self.d_model % (2 * self.heads) != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of 2 * heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if self.pad_len < 4 || self.pad_len > self.max_len {
            return bad(format!("need 4 <= pad_len <= max_len, got {} / {}", self.pad_len, self.max_len));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return bad("coord_scale must be positive".into());
        }
        if !(self.max_dt_s > 0.0) {
            return bad("max_dt_s must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("lr must be positive and lr_floor in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)".into());
        }
        if self.intervals.is_empty() || self.intervals.contains(&0) {
            return bad("intervals must be a non-empty set of positive steps".into());
        }
        Ok(())
    }
}

/// Configuration plus parameters; the unit that is trained, saved and served.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Epoch the parameters were taken from (0 = untrained).
    pub epoch: usize,
}

impl ModelState {
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, config.seed);
        Ok(Self { config, params, epoch: 0 })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
}
