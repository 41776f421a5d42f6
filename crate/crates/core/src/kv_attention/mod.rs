//! Grouped-query attention with cross-layer KV sharing.
//!
//! Query head `h` reads KV group `h / (n_h / n_g)`. Layers are grouped in runs
//! of `share_period`; the first layer of each run is the *source* layer that
//! computes and stores K/V, the remaining layers read the source's buffers.

mod attention;
mod cache;
mod memory;
mod rope;

pub use attention::{attend, attend_backward, attention_forward, AttentionOutput};
pub use cache::KVCache;
pub use memory::{kv_bytes_per_token, KVCacheLayout, Mechanism};
pub use rope::{apply_rope, rope_frequencies, rotate_in_place, RopeParams};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("unknown attention mechanism `{0}` (expected mha, gqa, mqa, cla, gqa_cla)")]
    UnknownMechanism(String),
    #[error("invalid rope parameters: {0}")]
    InvalidRope(String),
    #[error("layer {layer} is not a source layer (share period {share_period})")]
    NotSourceLayer { layer: usize, share_period: usize },
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("cache full: max_seq {max_seq} reached")]
    CapacityExceeded { max_seq: usize },
    #[error("empty cache for source layer {0}")]
    EmptyCache(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl KvError {
    pub fn code(&self) -> &'static str {
        match self {
            KvError::InvalidLayout(_) => "invalid_layout",
            KvError::UnknownMechanism(_) => "unknown_mechanism",
            KvError::InvalidRope(_) => "invalid_rope",
            KvError::NotSourceLayer { .. } => "not_source_layer",
            KvError::LayerOutOfRange { .. } => "layer_out_of_range",
            KvError::CapacityExceeded { .. } => "capacity_exceeded",
            KvError::EmptyCache(_) => "empty_cache",
            KvError::ShapeMismatch(_) => "shape_mismatch",
        }
    }
}
