//! Small-scale implementations of the moving parts of a shared/specialized
//! mixture-of-experts transformer:
//!
//! - [`routing`]: top-k gating with per-expert capacity and recycle routing
//!   of overflow tokens.
//! - [`kv_attention`]: GQA with cross-layer KV sharing, RoPE, and a byte-exact
//!   KV memory model.
//! - [`expert_lr`]: batch-size-aware learning rates, the shared/specialized
//!   scaling ratio and the warmup / cosine / anneal schedule.
//! - [`scaling`]: MoE compute budgets, isoFLOP minima and power-law fits.
//! - [`model`]: a desk-scale decoder with hand-written gradients and AdamW.

pub mod error;
pub mod expert_lr;
pub mod kv_attention;
pub mod model;
pub mod routing;
pub mod scaling;

pub use error::{Error, Result};
