//! Batch-size-aware learning rates and the three-phase schedule.
//!
//! For Adam-style optimizers the optimal learning rate at batch size `B` is
//!
//! ```text
//! eps_opt(B) = 2 eps_max / ( sqrt(B_noise / B) + sqrt(B / B_noise) )
//! ```
//!
//! The shared expert sees the whole batch while each of `n` specialized experts
//! sees roughly `B / n` tokens, so specialized experts are scaled by
//! `eps_opt(B) / eps_opt(B / n)`.
//!
//! The schedule warms up linearly, decays along a cosine to `anneal_factor *
//! peak`, then holds that level for the final `anneal_fraction` of tokens.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ANNEAL_FRACTION: f64 = 0.05;
pub const DEFAULT_ANNEAL_FACTOR: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LrError {
    #[error("invalid learning-rate parameters: {0}")]
    InvalidParams(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("tokens_seen {tokens_seen} outside schedule horizon [0, {total_tokens}]")]
    BeyondHorizon { tokens_seen: f64, total_tokens: f64 },
    #[error("unknown parameter group `{0}` (expected shared, specialized, non_expert)")]
    UnknownGroup(String),
}

impl LrError {
    pub fn code(&self) -> &'static str {
        match self {
            LrError::InvalidParams(_) => "invalid_params",
            LrError::InvalidSchedule(_) => "invalid_schedule",
            LrError::BeyondHorizon { .. } => "beyond_horizon",
            LrError::UnknownGroup(_) => "unknown_group",
        }
    }
}

type Result<T> = std::result::Result<T, LrError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertLRParams {
    /// Peak AdamW learning rate `eps_max`.
    pub eps_max: f64,
    /// Global batch size in tokens.
    pub batch: f64,
    /// Gradient-noise batch size at which `optimal_lr` peaks.
    pub b_noise: f64,
    /// Specialized experts sharing the batch.
    pub n: usize,
}

impl ExpertLRParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_max", self.eps_max), ("batch", self.batch), ("b_noise", self.b_noise)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(LrError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n == 0 {
            return Err(LrError::InvalidParams("n must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn optimal_lr(params: &ExpertLRParams, batch: f64) -> Result<f64> {
    params.validate()?;
    if !(batch.is_finite() && batch > 0.0) {
        return Err(LrError::InvalidParams(format!("batch must be positive, got {batch}")));
    }
    Ok(2.0 * params.eps_max / ((params.b_noise / batch).sqrt() + (batch / params.b_noise).sqrt()))
}

/// `eps_opt(B) / eps_opt(B / n)`: the specialized-expert multiplier.
pub fn expert_scale_ratio(params: &ExpertLRParams) -> Result<f64> {
    if params.n == 1 {
        params.validate()?;
        return Ok(1.0);
    }
    Ok(optimal_lr(params, params.batch)? / optimal_lr(params, params.batch / params.n as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Shared,
    Specialized,
    NonExpert,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Shared, ParamGroup::Specialized, ParamGroup::NonExpert];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Shared => "shared",
            ParamGroup::Specialized => "specialized",
            ParamGroup::NonExpert => "non_expert",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = LrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(ParamGroup::Shared),
            "specialized" => Ok(ParamGroup::Specialized),
            "non_expert" | "non-expert" => Ok(ParamGroup::NonExpert),
            _ => Err(LrError::UnknownGroup(s.to_string())),
        }
    }
}

/// Learning-rate multiplier per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupScales {
    pub shared: f64,
    pub specialized: f64,
    pub non_expert: f64,
}

impl Default for GroupScales {
    fn default() -> Self {
        Self { shared: 1.0, specialized: 1.0, non_expert: 1.0 }
    }
}

impl GroupScales {
    /// Shared and non-expert parameters at 1.0, specialized experts scaled
    /// by [`expert_scale_ratio`].
    pub fn expert_specific(params: &ExpertLRParams) -> Result<Self> {
        Ok(Self { shared: 1.0, specialized: expert_scale_ratio(params)?, non_expert: 1.0 })
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Shared => self.shared,
            ParamGroup::Specialized => self.specialized,
            ParamGroup::NonExpert => self.non_expert,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Decay,
    Anneal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LRSchedule {
    pub peak: f64,
    pub total_tokens: f64,
    pub warmup_fraction: f64,
    pub anneal_fraction: f64,
    pub anneal_factor: f64,
    pub decay_shape: DecayShape,
    pub per_group_scale: GroupScales,
}

pub fn build_schedule(
    peak: f64,
    total_tokens: f64,
    warmup_fraction: f64,
    anneal_fraction: f64,
    anneal_factor: f64,
    per_group_scale: GroupScales,
) -> Result<LRSchedule> {
    let s = LRSchedule {
        peak,
        total_tokens,
        warmup_fraction,
        anneal_fraction,
        anneal_factor,
        decay_shape: DecayShape::Cosine,
        per_group_scale,
    };
    s.validate()?;
    Ok(s)
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LrError::InvalidSchedule(msg));
        if !(self.peak.is_finite() && self.peak > 0.0) {
            return bad(format!("peak must be positive, got {}", self.peak));
        }
        if !(self.total_tokens.is_finite() && self.total_tokens > 0.0) {
            return bad(format!("total_tokens must be positive, got {}", self.total_tokens));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.anneal_fraction > 0.0 && self.anneal_fraction < 1.0) {
            return bad(format!("anneal_fraction must lie in (0, 1), got {}", self.anneal_fraction));
        }
        if self.warmup_fraction + self.anneal_fraction >= 1.0 {
            return bad("warmup_fraction + anneal_fraction must be below 1".into());
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return bad(format!("anneal_factor must lie in (0, 1), got {}", self.anneal_factor));
        }
        let g = self.per_group_scale;
        if [g.shared, g.specialized, g.non_expert].iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return bad("group multipliers must be positive".into());
        }
        Ok(())
    }

    pub fn warmup_end(&self) -> f64 {
        self.warmup_fraction * self.total_tokens
    }

    pub fn anneal_start(&self) -> f64 {
        (1.0 - self.anneal_fraction) * self.total_tokens
    }

    pub fn phase_at(&self, tokens_seen: f64) -> Phase {
        if tokens_seen < self.warmup_end() {
            Phase::Warmup
        } else if tokens_seen < self.anneal_start() {
            Phase::Decay
        } else {
            Phase::Anneal
        }
    }

    /// Schedule value before the group multiplier is applied.
    pub fn base_lr(&self, tokens_seen: f64) -> Result<f64> {
        if !(tokens_seen >= 0.0 && tokens_seen <= self.total_tokens) {
            return Err(LrError::BeyondHorizon { tokens_seen, total_tokens: self.total_tokens });
        }
        let floor = self.anneal_factor * self.peak;
        Ok(match self.phase_at(tokens_seen) {
            Phase::Warmup => self.peak * tokens_seen / self.warmup_end(),
            Phase::Decay => {
                let span = self.anneal_start() - self.warmup_end();
                let progress = (tokens_seen - self.warmup_end()) / span;
                match self.decay_shape {
                    DecayShape::Cosine => self.peak - (self.peak - floor) * 0.5 * (1.0 - (PI * progress).cos()),
                }
            }
            Phase::Anneal => floor,
        })
    }
}

/// Learning rate for `group` after `tokens_seen` training tokens.
pub fn lr_at(schedule: &LRSchedule, tokens_seen: f64, group: ParamGroup) -> Result<f64> {
    Ok(schedule.base_lr(tokens_seen)? * schedule.per_group_scale.get(group))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params() -> ExpertLRParams {
        ExpertLRParams { eps_max: 1.0, batch: 64.0, b_noise: 1.0, n: 16 }
    }

    fn schedule(scales: GroupScales) -> LRSchedule {
        build_schedule(3e-4, 1_000_000.0, 0.02, DEFAULT_ANNEAL_FRACTION, DEFAULT_ANNEAL_FACTOR, scales).unwrap()
    }

    #[test]
    fn peak_at_noise_scale() {
        let p = ExpertLRParams { eps_max: 0.37, batch: 1.0, b_noise: 512.0, n: 4 };
        assert_eq!(optimal_lr(&p, 512.0).unwrap(), 0.37);
    }

    #[test]
    fn direct_evaluation() {
        let v = optimal_lr(&reference_params(), 64.0).unwrap();
        assert!((v - 2.0 / 8.125).abs() < 1e-15);
        assert!((v - 0.246_153_846_153_846).abs() < 1e-14);
    }

    #[test]
    fn large_batch_asymptote() {
        let p = ExpertLRParams { eps_max: 2e-4, batch: 1.0, b_noise: 3.0, n: 1 };
        let batch = 1e6 * p.b_noise;
        let v = optimal_lr(&p, batch).unwrap();
        let asym = 2.0 * p.eps_max * (p.b_noise / batch).sqrt();
        assert!(((v - asym) / asym).abs() < 1e-3);
    }

    #[test]
    fn rejects_nonpositive_inputs() {
        assert!(optimal_lr(&reference_params(), 0.0).is_err());
        assert!(optimal_lr(&ExpertLRParams { b_noise: -1.0, ..reference_params() }, 1.0).is_err());
        assert!(expert_scale_ratio(&ExpertLRParams { n: 0, ..reference_params() }).is_err());
    }

    #[test]
    fn ratio_at_reference_setting() {
        let r = expert_scale_ratio(&reference_params()).unwrap();
        assert!((r - 2.5 / 8.125).abs() < 1e-15);
        assert!((r - 0.307_692).abs() < 1e-6);
    }

    #[test]
    fn ratio_limits() {
        let big = ExpertLRParams { batch: 1e12, ..reference_params() };
        assert!((expert_scale_ratio(&big).unwrap() - 0.25).abs() < 1e-5);
        assert_eq!(expert_scale_ratio(&ExpertLRParams { n: 1, ..reference_params() }).unwrap(), 1.0);
        // B * (B / n) = B_noise^2 puts the two batch sizes symmetrically around the peak.
        let sym = ExpertLRParams { eps_max: 1.0, batch: 4.0, b_noise: 1.0, n: 16 };
        assert!((expert_scale_ratio(&sym).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ratio_bounds_and_scale_symmetry() {
        for n in [2usize, 3, 16, 64] {
            for e in -8..=8 {
                let p = ExpertLRParams { eps_max: 1.0, batch: 2f64.powi(e), b_noise: 1.0, n };
                let r = expert_scale_ratio(&p).unwrap();
                let root = (n as f64).sqrt();
                assert!(r >= 1.0 / root - 1e-12 && r <= root + 1e-12);
                let c = 37.5;
                let scaled = ExpertLRParams { batch: p.batch * c, b_noise: c, ..p };
                let a = optimal_lr(&p, p.batch).unwrap();
                let b = optimal_lr(&scaled, scaled.batch).unwrap();
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn schedule_defaults_and_end_value() {
        let s = schedule(GroupScales::expert_specific(&reference_params()).unwrap());
        assert_eq!(s.anneal_fraction, 0.05);
        assert_eq!(s.anneal_factor, 0.1);
        for g in ParamGroup::ALL {
            let want = 0.1 * 3e-4 * s.per_group_scale.get(g);
            assert_eq!(lr_at(&s, s.total_tokens, g).unwrap(), want);
        }
    }

    #[test]
    fn warmup_end_hits_peak() {
        let s = schedule(GroupScales::default());
        assert_eq!(lr_at(&s, s.warmup_end(), ParamGroup::Shared).unwrap(), 3e-4);
        assert_eq!(lr_at(&s, 0.0, ParamGroup::Shared).unwrap(), 0.0);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let s = build_schedule(1e-3, 100.0, 0.0, 0.05, 0.1, GroupScales::default()).unwrap();
        assert_eq!(lr_at(&s, 0.0, ParamGroup::NonExpert).unwrap(), 1e-3);
    }

    #[test]
    fn rejects_bad_schedules() {
        let g = GroupScales::default();
        assert!(build_schedule(1.0, 100.0, 0.5, 0.5, 0.1, g).is_err());
        assert!(build_schedule(1.0, 100.0, 0.1, 0.0, 0.1, g).is_err());
        assert!(build_schedule(1.0, 100.0, 0.1, 0.05, 1.0, g).is_err());
        assert!(build_schedule(-1.0, 100.0, 0.1, 0.05, 0.1, g).is_err());
        let neg = GroupScales { specialized: 0.0, ..g };
        assert!(build_schedule(1.0, 100.0, 0.1, 0.05, 0.1, neg).is_err());
    }

    #[test]
    fn beyond_horizon_rejected() {
        let s = schedule(GroupScales::default());
        let err = lr_at(&s, s.total_tokens + 1.0, ParamGroup::Shared).unwrap_err();
        assert_eq!(err.code(), "beyond_horizon");
        assert!(lr_at(&s, -1.0, ParamGroup::Shared).is_err());
    }

    #[test]
    fn monotone_by_phase() {
        let s = schedule(GroupScales::default());
        let mut prev = lr_at(&s, 0.0, ParamGroup::Shared).unwrap();
        for i in 1..=10_000 {
            let t = s.total_tokens * i as f64 / 10_000.0;
            let v = lr_at(&s, t, ParamGroup::Shared).unwrap();
            if t <= s.warmup_end() {
                assert!(v >= prev);
            } else {
                assert!(v <= prev);
            }
            prev = v;
        }
    }

    #[test]
    fn group_ratio_is_specialized_scale() {
        let scales = GroupScales::expert_specific(&reference_params()).unwrap();
        let s = schedule(scales);
        for t in [0.0, 1.0, 12_345.0, 500_000.0, 990_000.0] {
            let shared = lr_at(&s, t, ParamGroup::Shared).unwrap();
            let spec = lr_at(&s, t, ParamGroup::Specialized).unwrap();
            assert_eq!(spec, shared * scales.specialized);
        }
    }

    #[test]
    fn group_names_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(g.name().parse::<ParamGroup>().unwrap(), g);
        }
        assert!("router".parse::<ParamGroup>().is_err());
    }
}
