#![allow(dead_code)]

use moe_workbench::model::{Model, PlanMode, Weights};
use moe_workbench::routing::DispatchPlan;
use rand::Rng;

/// Plain multi-head attention, one key/value head per query head.
///
/// `q`, `k`, `v` are `(seq, heads, d_h)`; causal.
pub fn mha_reference(q: &[f64], k: &[f64], v: &[f64], heads: usize, d_h: usize) -> Vec<f64> {
    let seq = q.len() / (heads * d_h);
    let at = |x: &[f64], t: usize, h: usize| x[(t * heads + h) * d_h..(t * heads + h + 1) * d_h].to_vec();
    let mut out = vec![0.0; q.len()];
    for t in 0..seq {
        for h in 0..heads {
            let qh = at(q, t, h);
            let scores: Vec<f64> = (0..=t)
                .map(|j| qh.iter().zip(at(k, j, h)).map(|(a, b)| a * b).sum::<f64>() / (d_h as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, w) in e.iter().enumerate() {
                for (d, x) in at(v, j, h).iter().enumerate() {
                    out[(t * heads + h) * d_h + d] += w / z * x;
                }
            }
        }
    }
    out
}

/// Multi-query attention: every query head reads the single `(seq, d_h)` key/value head.
pub fn mqa_reference(q: &[f64], k: &[f64], v: &[f64], heads: usize, d_h: usize) -> Vec<f64> {
    let seq = q.len() / (heads * d_h);
    let widen = |x: &[f64]| -> Vec<f64> {
        (0..seq).flat_map(|t| (0..heads).flat_map(move |_| x[t * d_h..(t + 1) * d_h].to_vec())).collect()
    };
    mha_reference(q, &widen(k), &widen(v), heads, d_h)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn flatten(weights: &Weights) -> Vec<f64> {
    weights.named_tensors().iter().flat_map(|(_, p)| p.tensor.data.iter().copied()).collect()
}

pub fn unflatten(weights: &mut Weights, flat: &[f64]) {
    let mut off = 0;
    for (_, t) in weights.tensors_mut() {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Training objective as a function of the flattened weights, with dispatch held fixed.
pub fn objective_at(model: &Model, plans: &[DispatchPlan], batch: &[Vec<usize>], flat: &[f64]) -> f64 {
    let mut m = model.clone();
    unflatten(&mut m.weights, flat);
    m.forward_train(batch, PlanMode::Fixed(plans)).unwrap().objective
}
