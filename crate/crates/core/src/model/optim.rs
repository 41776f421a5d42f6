//! AdamW with per-group learning rates taken from the schedule.

use serde::{Deserialize, Serialize};

use super::transformer::{Model, PlanMode, Weights};
use super::ModelError;
use crate::expert_lr::{lr_at, GroupScales, LRSchedule, ParamGroup};
use crate::routing::LoadStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("invalid AdamW hyper-parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    /// First and second moments, one buffer per parameter block in declaration order.
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model, hyper: AdamWConfig) -> Result<Self, ModelError> {
        hyper.validate()?;
        let zeros: Vec<Vec<f64>> =
            model.weights.named_tensors().iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Ok(Self { hyper, first_moment: zeros.clone(), second_moment: zeros, step: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupLrs {
    pub shared: f64,
    pub specialized: f64,
    pub non_expert: f64,
}

impl GroupLrs {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Shared => self.shared,
            ParamGroup::Specialized => self.specialized,
            ParamGroup::NonExpert => self.non_expert,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupCounts {
    pub shared: usize,
    pub specialized: usize,
    pub non_expert: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// 1-based optimizer step just taken.
    pub step: u64,
    pub tokens_seen: f64,
    pub ce_loss: f64,
    pub balance_loss: f64,
    pub objective: f64,
    /// Learning rate applied to each parameter group.
    pub lr: GroupLrs,
    pub group_scales: GroupScales,
    /// Parameters updated under each group's rate.
    pub group_params: GroupCounts,
    pub routing: LoadStats,
    pub optimizer: AdamWConfig,
}

/// Applies one AdamW step given precomputed gradients.
pub fn adamw_update(
    weights: &mut Weights,
    grads: &Weights,
    state: &mut OptimizerState,
    lrs: &GroupLrs,
) -> Result<GroupCounts, ModelError> {
    let grad_blocks: Vec<&[f64]> = grads.named_tensors().into_iter().map(|(_, p)| p.tensor.data.as_slice()).collect();
    let blocks = weights.tensors_mut();
    if blocks.len() != grad_blocks.len() || blocks.len() != state.first_moment.len() {
        return Err(ModelError::ShapeMismatch("optimizer state does not match the model".into()));
    }
    state.step += 1;
    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut counts = GroupCounts { shared: 0, specialized: 0, non_expert: 0 };
    for (((group, param), grad), (m, v)) in
        blocks.into_iter().zip(grad_blocks).zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let lr = lrs.get(group);
        match group {
            ParamGroup::Shared => counts.shared += param.len(),
            ParamGroup::Specialized => counts.specialized += param.len(),
            ParamGroup::NonExpert => counts.non_expert += param.len(),
        }
        for i in 0..param.data.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            param.data[i] -= lr * (update + weight_decay * param.data[i]);
        }
    }
    Ok(counts)
}

/// Forward, backward and AdamW update on one batch of sequences.
///
/// `tokens_seen` positions the step on the schedule; recycle seeds derive from
/// the model seed and the optimizer step so reruns are bit-identical.
pub fn train_step(
    model: &mut Model,
    batch: &[Vec<usize>],
    schedule: &LRSchedule,
    state: &mut OptimizerState,
    tokens_seen: f64,
) -> Result<StepReport, ModelError> {
    let fwd = model.forward_train(batch, PlanMode::Route { stream: state.step })?;
    if !fwd.objective.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            step: state.step + 1,
            detail: format!("ce_loss={} balance_loss={}", fwd.ce_loss, fwd.balance_loss),
        });
    }
    let grads = model.backward(&fwd)?;
    let lr = GroupLrs {
        shared: lr_at(schedule, tokens_seen, ParamGroup::Shared)?,
        specialized: lr_at(schedule, tokens_seen, ParamGroup::Specialized)?,
        non_expert: lr_at(schedule, tokens_seen, ParamGroup::NonExpert)?,
    };
    let group_params = adamw_update(&mut model.weights, &grads, state, &lr)?;
    Ok(StepReport {
        step: state.step,
        tokens_seen,
        ce_loss: fwd.ce_loss,
        balance_loss: fwd.balance_loss,
        objective: fwd.objective,
        lr,
        group_scales: schedule.per_group_scale,
        group_params,
        routing: fwd.load_stats(),
        optimizer: state.hyper,
    })
}
