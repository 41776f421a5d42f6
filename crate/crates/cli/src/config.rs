//! Run configuration: strict JSON, defaulted, validated.

use std::fs;
use std::path::{Path, PathBuf};

use moe_workbench::expert_lr::{
    build_schedule, optimal_lr, ExpertLRParams, GroupScales, LRSchedule, DEFAULT_ANNEAL_FACTOR, DEFAULT_ANNEAL_FRACTION,
};
use moe_workbench::model::{AdamWConfig, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub const PRESETS: [(&str, &str); 2] = [
    ("hunyuan-large", include_str!("../presets/hunyuan-large.preset")),
    ("toy", include_str!("../presets/toy.preset")),
];

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Root seed: model initialisation, recycle draws and demo data.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default)]
    pub lr: LrConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub eps_max: f64,
    /// Global batch, in the same units as `b_noise`.
    pub batch: f64,
    pub b_noise: f64,
    /// Schedule peak for shared and non-expert parameters; defaults to the
    /// batch-adjusted optimum `optimal_lr(batch)`.
    pub peak: Option<f64>,
    pub total_tokens: Option<f64>,
    pub warmup_fraction: f64,
    pub anneal_fraction: f64,
    pub anneal_factor: f64,
    /// Scale specialized experts by the shared/specialized ratio.
    pub expert_specific: bool,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            eps_max: 1e-2,
            batch: 64.0,
            b_noise: 1.0,
            peak: None,
            total_tokens: None,
            warmup_fraction: 0.05,
            anneal_fraction: DEFAULT_ANNEAL_FRACTION,
            anneal_factor: DEFAULT_ANNEAL_FACTOR,
            expert_specific: true,
        }
    }
}

impl LrConfig {
    pub fn params(&self, n: usize) -> ExpertLRParams {
        ExpertLRParams { eps_max: self.eps_max, batch: self.batch, b_noise: self.b_noise, n }
    }

    pub fn scales(&self, n: usize) -> Result<GroupScales, CliError> {
        if self.expert_specific {
            Ok(GroupScales::expert_specific(&self.params(n))?)
        } else {
            Ok(GroupScales::default())
        }
    }

    pub fn peak(&self, n: usize) -> Result<f64, CliError> {
        match self.peak {
            Some(p) => Ok(p),
            None => Ok(optimal_lr(&self.params(n), self.batch)?),
        }
    }

    pub fn schedule(&self, n: usize, total_tokens: f64) -> Result<LRSchedule, CliError> {
        Ok(build_schedule(
            self.peak(n)?,
            total_tokens,
            self.warmup_fraction,
            self.anneal_fraction,
            self.anneal_factor,
            self.scales(n)?,
        )?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub activated_params: Option<f64>,
    pub tokens: Option<f64>,
    pub batch_over_critical: Option<f64>,
    /// CSV of isoFLOP measurements with header `c_min,n,d,loss`.
    pub measurements: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub sequences: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, sequences: 8, seq_len: 12 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Where `train-demo` writes its checkpoint.
    pub checkpoint: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io("io.read", path, e))?;
    parse_config(&text, &path.display().to_string())
}

pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::config("config.unknown_preset", format!("no preset `{name}`; known: {}", known.join(", ")))
    })?;
    parse_config(text, &format!("preset {name}"))
}

/// Parses and validates; `source` names the input in error messages.
pub fn parse_config(text: &str, source: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let code = if inner.to_string().starts_with("unknown field") { "config.unknown_key" } else { "config.parse" };
        CliError::config(code, format!("{source}: {inner} (key `{path}`)"))
    })?;
    cfg.validate().map_err(|e| match e {
        CliError::Core(core) => CliError::config(core.code(), format!("{source}: {core}")),
        CliError::Config { code, message } => CliError::config(code, format!("{source}: {message}")),
        other => other,
    })?;
    Ok(cfg)
}

impl RunConfig {
    /// Checks every section and pushes the root seed into the model.
    pub fn validate(&mut self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "config.schema_version",
                format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.model.seed != 0 && self.model.seed != self.seed {
            return Err(CliError::config(
                "config.invalid",
                format!("model.seed ({}) conflicts with seed ({})", self.model.seed, self.seed),
            ));
        }
        self.model.seed = self.seed;
        self.model.validate()?;
        self.optimizer.validate()?;
        let n = self.model.routing.num_specialized_experts;
        self.lr.params(n).validate()?;
        if let Some(p) = self.lr.peak {
            if !(p.is_finite() && p > 0.0) {
                return Err(CliError::config("config.invalid", format!("lr.peak must be positive, got {p}")));
            }
        }
        // Schedule fractions are checked even when no horizon is configured.
        self.lr.schedule(n, self.lr.total_tokens.unwrap_or(1.0))?;
        let s = &self.scaling;
        for (name, v) in [
            ("scaling.activated_params", s.activated_params),
            ("scaling.tokens", s.tokens),
            ("scaling.batch_over_critical", s.batch_over_critical),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(CliError::config("config.invalid", format!("{name} must be positive, got {v}")));
                }
            }
        }
        let t = &self.train;
        if t.steps == 0 || t.sequences == 0 || t.seq_len < 2 {
            return Err(CliError::config("config.invalid", "train needs steps >= 1, sequences >= 1 and seq_len >= 2"));
        }
        Ok(())
    }
}
