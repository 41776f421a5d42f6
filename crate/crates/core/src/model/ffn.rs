//! SwiGLU experts and the routed MoE feed-forward block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{dot, linear, linear_backward, silu, silu_grad, Tensor};
use super::ModelError;
use crate::expert_lr::ParamGroup;
use crate::routing::{
    combine_outputs, gate_scores, load_balance_loss, plan_dispatch, DispatchPlan, GateDistribution, RoutingConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertGroup {
    Shared,
    Specialized,
}

impl From<ExpertGroup> for ParamGroup {
    fn from(g: ExpertGroup) -> Self {
        match g {
            ExpertGroup::Shared => ParamGroup::Shared,
            ExpertGroup::Specialized => ParamGroup::Specialized,
        }
    }
}

/// `down(silu(gate x) * (up x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `(ffn, hidden)`
    pub gate: Tensor,
    /// `(ffn, hidden)`
    pub up: Tensor,
    /// `(hidden, ffn)`
    pub down: Tensor,
    pub group: ExpertGroup,
}

impl ExpertParams {
    pub fn init<R: Rng>(hidden: usize, ffn: usize, std: f64, group: ExpertGroup, rng: &mut R) -> Self {
        Self {
            gate: Tensor::randn(ffn, hidden, std, rng),
            up: Tensor::randn(ffn, hidden, std, rng),
            down: Tensor::randn(hidden, ffn, std, rng),
            group,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gate: self.gate.zeros_like(), up: self.up.zeros_like(), down: self.down.zeros_like(), group: self.group }
    }

    pub fn hidden_size(&self) -> usize {
        self.gate.cols
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 3] {
        [("gate", &self.gate), ("up", &self.up), ("down", &self.down)]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.gate, &mut self.up, &mut self.down]
    }
}

pub fn swiglu_forward(x: &[f64], expert: &ExpertParams) -> Result<Vec<f64>, ModelError> {
    if x.len() != expert.hidden_size() {
        return Err(ModelError::ShapeMismatch(format!(
            "input width {} for expert hidden size {}",
            x.len(),
            expert.hidden_size()
        )));
    }
    Ok(expert_forward(expert, x).0)
}

/// Intermediates for a batch of rows pushed through one expert.
#[derive(Debug, Clone)]
pub(crate) struct ExpertState {
    x: Vec<f64>,
    gate_pre: Vec<f64>,
    up_pre: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) fn expert_forward(expert: &ExpertParams, x: &[f64]) -> (Vec<f64>, ExpertState) {
    let gate_pre = linear(&expert.gate, x);
    let up_pre = linear(&expert.up, x);
    let act: Vec<f64> = gate_pre.iter().zip(&up_pre).map(|(&g, &u)| silu(g) * u).collect();
    let y = linear(&expert.down, &act);
    (y, ExpertState { x: x.to_vec(), gate_pre, up_pre, act })
}

pub(crate) fn expert_backward(
    expert: &ExpertParams,
    state: &ExpertState,
    dy: &[f64],
    grads: &mut ExpertParams,
) -> Vec<f64> {
    let dact = linear_backward(&expert.down, &state.act, dy, &mut grads.down);
    let mut dgate = vec![0.0; dact.len()];
    let mut dup = vec![0.0; dact.len()];
    for i in 0..dact.len() {
        let g = state.gate_pre[i];
        dgate[i] = dact[i] * state.up_pre[i] * silu_grad(g);
        dup[i] = dact[i] * silu(g);
    }
    let mut dx = linear_backward(&expert.gate, &state.x, &dgate, &mut grads.gate);
    let dx_up = linear_backward(&expert.up, &state.x, &dup, &mut grads.up);
    for (a, b) in dx.iter_mut().zip(dx_up) {
        *a += b;
    }
    dx
}

/// Router plus shared and specialized experts for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeFfn {
    /// `(num_specialized, hidden)`
    pub router: Tensor,
    pub shared: Vec<ExpertParams>,
    pub experts: Vec<ExpertParams>,
}

/// How the forward pass obtains its dispatch plan.
#[derive(Debug, Clone, Copy)]
pub enum PlanSource<'a> {
    /// Route afresh with the given recycle seed.
    Route { seed: u64 },
    /// Reuse an existing plan's assignments; gate weights are re-read from the
    /// current gate probabilities. Makes the block a smooth function of its
    /// parameters, which is what finite-difference checks need.
    Fixed(&'a DispatchPlan),
}

/// Forward intermediates required by [`MoeFfn::backward`].
#[derive(Debug, Clone)]
pub struct MoeForward {
    pub gates: GateDistribution,
    pub plan: DispatchPlan,
    /// Unweighted load-balance loss of this batch.
    pub balance_loss: f64,
    x: Vec<f64>,
    shared_states: Vec<ExpertState>,
    /// Per specialized expert: assignment slots (token, position in plan order)
    /// and the batched expert state for those tokens.
    expert_states: Vec<(Vec<(usize, usize)>, ExpertState)>,
    /// Expert output per assignment, in plan order.
    assignment_outputs: Vec<Vec<f64>>,
}

impl MoeForward {
    pub fn num_tokens(&self) -> usize {
        self.plan.num_tokens()
    }
}

fn reweight(plan: &DispatchPlan, gates: &GateDistribution) -> DispatchPlan {
    let mut p = plan.clone();
    for (t, list) in p.token_assignments.iter_mut().enumerate() {
        for a in list.iter_mut() {
            a.gate_weight = gates.row(t)[a.expert];
        }
    }
    p
}

impl MoeFfn {
    pub fn init<R: Rng>(hidden: usize, ffn: usize, routing: &RoutingConfig, std: f64, rng: &mut R) -> Self {
        let router = Tensor::randn(routing.num_specialized_experts, hidden, std, rng);
        let shared = (0..routing.num_shared_experts)
            .map(|_| ExpertParams::init(hidden, ffn, std, ExpertGroup::Shared, rng))
            .collect();
        let experts = (0..routing.num_specialized_experts)
            .map(|_| ExpertParams::init(hidden, ffn, std, ExpertGroup::Specialized, rng))
            .collect();
        Self { router, shared, experts }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            router: self.router.zeros_like(),
            shared: self.shared.iter().map(ExpertParams::zeros_like).collect(),
            experts: self.experts.iter().map(ExpertParams::zeros_like).collect(),
        }
    }

    fn hidden_size(&self) -> usize {
        self.router.cols
    }

    /// Runs `x` (`num_tokens * hidden`, row-major) through the block.
    pub fn forward(
        &self,
        x: &[f64],
        routing: &RoutingConfig,
        source: PlanSource<'_>,
    ) -> Result<(Vec<f64>, MoeForward), ModelError> {
        let h = self.hidden_size();
        if x.is_empty() || !x.len().is_multiple_of(h) {
            return Err(ModelError::ShapeMismatch(format!("{} inputs do not tile hidden size {h}", x.len())));
        }
        let tokens = x.len() / h;
        let logits = linear(&self.router, x);
        let gates = gate_scores(&logits, routing)?;
        let plan = match source {
            PlanSource::Route { seed } => plan_dispatch(&gates, tokens, routing, seed)?,
            PlanSource::Fixed(p) => {
                if p.num_tokens() != tokens || p.num_experts != self.experts.len() {
                    return Err(ModelError::ShapeMismatch("fixed plan does not match the batch".into()));
                }
                reweight(p, &gates)
            }
        };

        let mut shared_out = vec![0.0; x.len()];
        let mut shared_states = Vec::with_capacity(self.shared.len());
        for e in &self.shared {
            let (y, st) = expert_forward(e, x);
            shared_out.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
            shared_states.push(st);
        }

        let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.experts.len()];
        for (i, (t, a)) in plan.assignments().enumerate() {
            slots[a.expert].push((t, i));
        }
        let mut assignment_outputs = vec![Vec::new(); plan.num_assignments()];
        let mut expert_states = Vec::with_capacity(self.experts.len());
        for (e, list) in slots.into_iter().enumerate() {
            let rows: Vec<f64> = list.iter().flat_map(|&(t, _)| x[t * h..(t + 1) * h].iter().copied()).collect();
            let (y, st) = expert_forward(&self.experts[e], &rows);
            for (k, &(_, i)) in list.iter().enumerate() {
                assignment_outputs[i] = y[k * h..(k + 1) * h].to_vec();
            }
            expert_states.push((list, st));
        }

        let shared_rows: Vec<Vec<f64>> = shared_out.chunks(h).map(<[f64]>::to_vec).collect();
        let out: Vec<f64> = combine_outputs(&shared_rows, &assignment_outputs, &plan)?.into_iter().flatten().collect();
        let balance_loss = load_balance_loss(&gates, &plan);
        Ok((
            out,
            MoeForward { gates, plan, balance_loss, x: x.to_vec(), shared_states, expert_states, assignment_outputs },
        ))
    }

    /// Gradients of `<dout, output> + aux_coef * balance_loss` with respect to
    /// the block's parameters and its input.
    ///
    /// Expert selection is held fixed; gradient reaches the router only through
    /// the gate probability of each selected expert and the load-balance term.
    pub fn backward(&self, state: &MoeForward, dout: &[f64], aux_coef: f64) -> Result<(MoeFfn, Vec<f64>), ModelError> {
        let h = self.hidden_size();
        let tokens = state.num_tokens();
        if dout.len() != tokens * h {
            return Err(ModelError::ShapeMismatch(format!(
                "upstream gradient of length {} for {tokens} tokens of width {h}",
                dout.len()
            )));
        }
        let n = self.experts.len();
        let mut grads = self.zeros_like();
        let mut dx = vec![0.0; dout.len()];

        for ((e, st), g) in self.shared.iter().zip(&state.shared_states).zip(grads.shared.iter_mut()) {
            let d = expert_backward(e, st, dout, g);
            dx.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }

        let weights: Vec<f64> = state.plan.assignments().map(|(_, a)| a.gate_weight).collect();
        let mut dprob = vec![0.0; tokens * n];
        for (e, (list, st)) in state.expert_states.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let mut dy = Vec::with_capacity(list.len() * h);
            for &(t, i) in list {
                let dt = &dout[t * h..(t + 1) * h];
                dy.extend(dt.iter().map(|v| v * weights[i]));
                dprob[t * n + e] += dot(dt, &state.assignment_outputs[i]);
            }
            let d = expert_backward(&self.experts[e], st, &dy, &mut grads.experts[e]);
            for (k, &(t, _)) in list.iter().enumerate() {
                for (a, b) in dx[t * h..(t + 1) * h].iter_mut().zip(&d[k * h..(k + 1) * h]) {
                    *a += b;
                }
            }
        }

        if aux_coef != 0.0 {
            // d/dp_{t,i} of n * sum_i f_i * mean_t p_{t,i} is n * f_i / T.
            let mut frac = vec![0.0; n];
            for prefs in &state.plan.preferences {
                frac[prefs[0]] += 1.0 / tokens as f64;
            }
            for row in dprob.chunks_mut(n) {
                for (d, f) in row.iter_mut().zip(&frac) {
                    *d += aux_coef * n as f64 * f / tokens as f64;
                }
            }
        }

        let mut dlogits = vec![0.0; tokens * n];
        for t in 0..tokens {
            let p = state.gates.row(t);
            let dp = &dprob[t * n..(t + 1) * n];
            let inner = dot(p, dp);
            for i in 0..n {
                dlogits[t * n + i] = p[i] * (dp[i] - inner);
            }
        }
        let d = linear_backward(&self.router, &state.x, &dlogits, &mut grads.router);
        dx.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        Ok((grads, dx))
    }

    /// `(name, group, tensor)` in declaration order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = vec![("router".to_string(), ParamGroup::NonExpert, &self.router)];
        for (kind, list) in [("shared", &self.shared), ("experts", &self.experts)] {
            for (i, e) in list.iter().enumerate() {
                for (name, t) in e.tensors() {
                    out.push((format!("{kind}.{i}.{name}"), e.group.into(), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = vec![(ParamGroup::NonExpert, &mut self.router)];
        for e in self.shared.iter_mut().chain(self.experts.iter_mut()) {
            let g: ParamGroup = e.group.into();
            for t in e.tensors_mut() {
                out.push((g, t));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_expert(g: f64, u: f64, d: f64) -> ExpertParams {
        ExpertParams {
            gate: Tensor { rows: 1, cols: 1, data: vec![g] },
            up: Tensor { rows: 1, cols: 1, data: vec![u] },
            down: Tensor { rows: 1, cols: 1, data: vec![d] },
            group: ExpertGroup::Specialized,
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = ExpertParams::init(6, 10, 0.5, ExpertGroup::Shared, &mut rng);
        assert_eq!(swiglu_forward(&[0.0; 6], &e).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn scalar_case_is_silu_of_one() {
        let y = swiglu_forward(&[1.0], &scalar_expert(1.0, 1.0, 1.0)).unwrap();
        assert!((y[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = ExpertParams::init(3, 5, 0.7, ExpertGroup::Specialized, &mut rng);
        let x = [0.3, -1.1, 0.8];
        let got = swiglu_forward(&x, &e).unwrap();
        let mut act = [0.0; 5];
        for j in 0..5 {
            let mut g = 0.0;
            let mut u = 0.0;
            for i in 0..3 {
                g += e.gate.data[j * 3 + i] * x[i];
                u += e.up.data[j * 3 + i] * x[i];
            }
            act[j] = g / (1.0 + (-g).exp()) * u;
        }
        for o in 0..3 {
            let want: f64 = (0..5).map(|j| e.down.data[o * 5 + j] * act[j]).sum();
            assert!((got[o] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let e = scalar_expert(1.0, 1.0, 1.0);
        assert!(matches!(swiglu_forward(&[1.0, 2.0], &e), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let routing = RoutingConfig { num_specialized_experts: 2, capacity_factor: 2.0, ..Default::default() };
        let ffn = MoeFfn::init(4, 3, &routing, 0.5, &mut rng);
        let x = vec![0.1; 8];
        let (_, st) = ffn.forward(&x, &routing, PlanSource::Route { seed: 0 }).unwrap();
        assert!(ffn.backward(&st, &[0.0; 4], 0.0).is_err());
    }
}
