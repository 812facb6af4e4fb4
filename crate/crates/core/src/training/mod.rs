//! Losses, the training loop, length specialisation and curriculum schedules.

mod curriculum;
mod ensemble;
mod fit;
mod gate;
mod losses;
mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LengthBucket;
use crate::metrics::MetricError;
use crate::models::{CheckpointError, ModelError};
use crate::numcore::NumError;

pub use curriculum::{curriculum_schedule, curriculum_schedule_with, stage_at, CurriculumStage, FINAL_STAGE_LR_SCALE};
pub use ensemble::{route, train_ensemble, SpecialistEnsemble};
pub use fit::{evaluate, fit, fit_from, parse_epoch_log, write_epoch_log, BatchAudit, EpochRecord, FitResult};
pub use gate::{gradient_gate, GateResult};
pub use losses::{loss_for, loss_pairwise, loss_pointer, loss_position, make_pairwise_targets};
pub use state::{load_train_state, save_train_state, TrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    Universal,
    SpecializedDirect,
    SpecializedCurriculum,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "universal" => Some(Strategy::Universal),
            "direct" | "specializeddirect" => Some(Strategy::SpecializedDirect),
            "curriculum" | "specializedcurriculum" => Some(Strategy::SpecializedCurriculum),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Absolute learning rate of the last curriculum stage.
    pub lr_final_stage: f64,
    pub clip_norm: f64,
    pub strategy: Strategy,
    pub target_bucket: Option<LengthBucket>,
    pub weight_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            lr_final_stage: 1e-4,
            clip_norm: 1.0,
            strategy: Strategy::Universal,
            target_bucket: None,
            weight_factor: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_final_stage > 0.0 && self.lr_final_stage.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.weight_factor >= 1.0 && self.weight_factor.is_finite()) {
            return bad("weight_factor must be at least 1");
        }
        if self.strategy != Strategy::Universal && self.target_bucket.is_none() {
            return bad("specialized strategies need a target_bucket");
        }
        if self.strategy == Strategy::SpecializedCurriculum && self.epochs < 4 {
            return bad("curriculum training needs at least 4 epochs");
        }
        Ok(())
    }
}

/// Loss weight of a document: `factor` inside the target bucket, 1 elsewhere.
pub fn specialization_weight(doc_len: usize, target: LengthBucket, factor: f64) -> f64 {
    if target.contains(doc_len) {
        factor
    } else {
        1.0
    }
}
