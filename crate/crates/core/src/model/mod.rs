//! Desk-scale MoE decoder used to exercise routing, caching and expert-specific
//! learning rates end to end.

mod checkpoint;
mod config;
mod ffn;
mod gradcheck;
mod optim;
mod tensor;
mod transformer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, ParamEntry,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, DEFAULT_MAX_PARAMS};
pub use ffn::{swiglu_forward, ExpertGroup, ExpertParams, MoeFfn, MoeForward, PlanSource};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use optim::{adamw_update, train_step, AdamWConfig, GroupCounts, GroupLrs, OptimizerState, StepReport};
pub use tensor::Tensor;
pub use transformer::{
    build_model, InferenceOutput, KvProjection, LayerWeights, Model, ParamRef, PlanMode, TrainForward, Weights,
};

use thiserror::Error;

use crate::expert_lr::LrError;
use crate::kv_attention::KvError;
use crate::routing::RoutingError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model has {count} parameters, above the desk-scale ceiling of {ceiling}")]
    OverCeiling { count: u64, ceiling: u64 },
    #[error("token id {token} outside vocabulary of {vocab}")]
    InvalidToken { token: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch must hold at least one sequence of two or more tokens")]
    EmptyBatch,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("backward called without matching forward state")]
    MissingForwardState,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Lr(#[from] LrError),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::InvalidConfig(_) => "invalid_config",
            ModelError::OverCeiling { .. } => "over_ceiling",
            ModelError::InvalidToken { .. } => "invalid_token",
            ModelError::ShapeMismatch(_) => "shape_mismatch",
            ModelError::EmptyBatch => "empty_batch",
            ModelError::NonFiniteLoss { .. } => "non_finite_loss",
            ModelError::MissingForwardState => "missing_forward_state",
            ModelError::Checkpoint(_) => "checkpoint",
            ModelError::Io(_) => "io",
            ModelError::Routing(e) => e.code(),
            ModelError::Kv(e) => e.code(),
            ModelError::Lr(e) => e.code(),
        }
    }
}
