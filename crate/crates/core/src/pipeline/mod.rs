//! Pretraining, evaluation, fine-tuning, ablations and persistence.

mod ablate;
mod adam;
mod checkpoint;
mod config;
mod eval;
mod finetune;
mod metrics;
mod train;

pub use ablate::{ablate, ablation_table, lattice, AblationRow, Variant};
pub use adam::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, HEAD};
pub use config::{RunConfig, KEYS};
pub use eval::{
    argmax_classes, copy_last_prediction, ego_shift_prediction, evaluate, mask_iou, rollout_dump, EvalReport, GridScores,
    IouCounts,
};
pub use finetune::{binary_scores, finetune, positive_weight, weighted_bce, BinaryScores, FinetuneReport, Task};
pub use metrics::MetricsLog;
pub use train::{load_episodes, pretrain, pretrain_manifest, PretrainOutput};

use crate::model::ModelError;
use crate::nn::NnError;
use crate::objective::ObjectiveError;
use crate::world::WorldError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("not a checkpoint: magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint entry `{entry}`: {reason}")]
    Index { entry: String, reason: String },
    #[error("config fingerprint mismatch: checkpoint {expected}, config {found}")]
    Fingerprint { expected: String, found: String },
    #[error("gradient for `{name}` has {got} values, parameter has {expected}")]
    Shape { name: String, expected: usize, got: usize },
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: usize, breakdown: String },
    #[error("unknown task `{0}` (expected detect-dynamic or map-static)")]
    UnknownTask(String),
    #[error("no episodes in {0}")]
    EmptySplit(&'static str),
}

impl From<NnError> for PipelineError {
    fn from(e: NnError) -> Self {
        PipelineError::Model(e.into())
    }
}

impl From<crate::grad::GradError> for PipelineError {
    fn from(e: crate::grad::GradError) -> Self {
        PipelineError::Model(e.into())
    }
}

#[cfg(test)]
mod tests;
