use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::kv_attention::{KVCacheLayout, RopeParams};
use crate::routing::RoutingConfig;

pub const DEFAULT_MAX_PARAMS: u64 = 100_000_000;

fn default_max_params() -> u64 {
    DEFAULT_MAX_PARAMS
}

fn default_aux_loss_coef() -> f64 {
    0.01
}

fn default_rms_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub kv_groups: usize,
    pub head_dim: usize,
    pub hidden_size: usize,
    pub ffn_hidden_size: usize,
    pub vocab_size: usize,
    pub routing: RoutingConfig,
    pub rope: RopeParams,
    pub share_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Desk-scale ceiling on total parameters for anything that allocates.
    #[serde(default = "default_max_params")]
    pub max_params: u64,
    /// Weight of the load-balance loss in the training objective.
    #[serde(default = "default_aux_loss_coef")]
    pub aux_loss_coef: f64,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
}

impl ModelConfig {
    /// The 389B-total / 52B-activated reference architecture.
    ///
    /// Only the memory model and parameter accounting can use it; building it
    /// trips the `max_params` ceiling.
    pub fn reference() -> Self {
        Self {
            layers: 64,
            heads: 80,
            kv_groups: 8,
            head_dim: 80,
            hidden_size: 6400,
            ffn_hidden_size: 18304,
            vocab_size: 128_000,
            routing: RoutingConfig {
                num_shared_experts: 1,
                num_specialized_experts: 16,
                top_k: 1,
                capacity_factor: 1.25,
                recycle_enabled: true,
            },
            rope: RopeParams { base: RopeParams::DEFAULT_BASE, d_h: 80 },
            share_period: 2,
            seed: 0,
            max_params: DEFAULT_MAX_PARAMS,
            aux_loss_coef: default_aux_loss_coef(),
            rms_eps: default_rms_eps(),
        }
    }

    /// A few-thousand-parameter configuration for tests and demos.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 4,
            kv_groups: 2,
            head_dim: 4,
            hidden_size: 16,
            ffn_hidden_size: 16,
            vocab_size: 16,
            routing: RoutingConfig {
                num_shared_experts: 1,
                num_specialized_experts: 4,
                top_k: 1,
                capacity_factor: 1.5,
                recycle_enabled: true,
            },
            rope: RopeParams { base: RopeParams::DEFAULT_BASE, d_h: 4 },
            share_period: 2,
            seed: 0,
            max_params: DEFAULT_MAX_PARAMS,
            aux_loss_coef: default_aux_loss_coef(),
            rms_eps: default_rms_eps(),
        }
    }

    /// Checks shape invariants; does not apply the parameter ceiling.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_groups", self.kv_groups),
            ("head_dim", self.head_dim),
            ("ffn_hidden_size", self.ffn_hidden_size),
            ("vocab_size", self.vocab_size),
            ("share_period", self.share_period),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden_size != self.heads * self.head_dim {
            return bad(format!(
                "hidden_size ({}) must equal heads * head_dim ({} * {})",
                self.hidden_size, self.heads, self.head_dim
            ));
        }
        if self.kv_groups > self.heads || !self.heads.is_multiple_of(self.kv_groups) {
            return bad(format!("kv_groups ({}) must divide heads ({})", self.kv_groups, self.heads));
        }
        if self.rope.d_h != self.head_dim {
            return bad(format!("rope.d_h ({}) must equal head_dim ({})", self.rope.d_h, self.head_dim));
        }
        self.rope.validate()?;
        self.routing.validate()?;
        if !(self.aux_loss_coef.is_finite() && self.aux_loss_coef >= 0.0) {
            return bad("aux_loss_coef must be non-negative".into());
        }
        if !(self.rms_eps.is_finite() && self.rms_eps >= 0.0) {
            return bad("rms_eps must be non-negative".into());
        }
        Ok(())
    }

    /// Validates and enforces `max_params`.
    pub fn validate_buildable(&self) -> Result<(), ModelError> {
        self.validate()?;
        let count = self.param_count();
        if count > self.max_params {
            return Err(ModelError::OverCeiling { count, ceiling: self.max_params });
        }
        Ok(())
    }

    pub fn kv_layout(&self) -> KVCacheLayout {
        KVCacheLayout {
            n_h: self.heads,
            n_g: self.kv_groups,
            d_h: self.head_dim,
            layers: self.layers,
            share_period: self.share_period,
            bytes_per_element: 2,
        }
    }

    pub fn is_source_layer(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.share_period)
    }

    fn expert_params(&self) -> u64 {
        3 * (self.ffn_hidden_size * self.hidden_size) as u64
    }

    fn dense_params(&self) -> u64 {
        let h = self.hidden_size as u64;
        let kv = (self.kv_groups * self.head_dim) as u64;
        let per_layer = 2 * h + 2 * h * h + self.routing.num_specialized_experts as u64 * h;
        let sources = self.layers.div_ceil(self.share_period) as u64;
        self.layers as u64 * per_layer + sources * 2 * h * kv + 2 * self.vocab_size as u64 * h + h
    }

    /// Total parameters, from the closed form (nothing is allocated).
    pub fn param_count(&self) -> u64 {
        let experts = (self.routing.num_shared_experts + self.routing.num_specialized_experts) as u64;
        self.dense_params() + self.layers as u64 * experts * self.expert_params()
    }

    /// Parameters touched by one token: shared experts plus `top_k` specialized.
    pub fn activated_param_count(&self) -> u64 {
        let active = (self.routing.num_shared_experts + self.routing.top_k) as u64;
        self.dense_params() + self.layers as u64 * active * self.expert_params()
    }
}
