//! Decoder stack: embeddings, pre-norm GQA+CLA attention and MoE FFN blocks,
//! and an untied output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ffn::{MoeFfn, MoeForward, PlanSource};
use super::tensor::{linear, linear_backward, rms_norm, rms_norm_backward, RmsNormState, Tensor};
use super::{ModelConfig, ModelError};
use crate::expert_lr::ParamGroup;
use crate::kv_attention::{
    attend, attend_backward, attention_forward, rope_frequencies, rotate_in_place, AttentionOutput, KVCache,
};
use crate::routing::{expert_load_stats, DispatchPlan, LoadStats};

#[derive(Debug, Clone, PartialEq)]
pub struct KvProjection {
    /// `(n_g * d_h, hidden)`
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    /// Present on source layers only; the rest of a share group reuses it.
    pub kv: Option<KvProjection>,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub ffn: MoeFfn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// One named parameter block.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a> {
    pub group: ParamGroup,
    pub tensor: &'a Tensor,
}

impl Weights {
    pub fn zeros_like(&self) -> Self {
        Self {
            embed: self.embed.zeros_like(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.zeros_like(),
                    wq: l.wq.zeros_like(),
                    kv: l.kv.as_ref().map(|kv| KvProjection { wk: kv.wk.zeros_like(), wv: kv.wv.zeros_like() }),
                    wo: l.wo.zeros_like(),
                    ffn_norm: l.ffn_norm.zeros_like(),
                    ffn: l.ffn.zeros_like(),
                })
                .collect(),
            final_norm: self.final_norm.zeros_like(),
            lm_head: self.lm_head.zeros_like(),
        }
    }

    /// Parameter blocks with their names, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, ParamRef<'_>)> {
        let ne = ParamGroup::NonExpert;
        let mut out = vec![("embed".to_string(), ParamRef { group: ne, tensor: &self.embed })];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layers.{i}.{name}");
            out.push((p("attn_norm"), ParamRef { group: ne, tensor: &l.attn_norm }));
            out.push((p("wq"), ParamRef { group: ne, tensor: &l.wq }));
            if let Some(kv) = &l.kv {
                out.push((p("wk"), ParamRef { group: ne, tensor: &kv.wk }));
                out.push((p("wv"), ParamRef { group: ne, tensor: &kv.wv }));
            }
            out.push((p("wo"), ParamRef { group: ne, tensor: &l.wo }));
            out.push((p("ffn_norm"), ParamRef { group: ne, tensor: &l.ffn_norm }));
            for (name, group, tensor) in l.ffn.tensors() {
                out.push((p(&format!("ffn.{name}")), ParamRef { group, tensor }));
            }
        }
        out.push(("final_norm".to_string(), ParamRef { group: ne, tensor: &self.final_norm }));
        out.push(("lm_head".to_string(), ParamRef { group: ne, tensor: &self.lm_head }));
        out
    }

    /// Mutable blocks in the same order as [`Weights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let ne = ParamGroup::NonExpert;
        let mut out = vec![(ne, &mut self.embed)];
        for l in self.layers.iter_mut() {
            out.push((ne, &mut l.attn_norm));
            out.push((ne, &mut l.wq));
            if let Some(kv) = l.kv.as_mut() {
                out.push((ne, &mut kv.wk));
                out.push((ne, &mut kv.wv));
            }
            out.push((ne, &mut l.wo));
            out.push((ne, &mut l.ffn_norm));
            out.extend(l.ffn.tensors_mut());
        }
        out.push((ne, &mut self.final_norm));
        out.push((ne, &mut self.lm_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, p)| p.tensor.len()).sum()
    }
}

/// splitmix64 finaliser, used to derive independent recycle seeds.
pub(crate) fn mix_seed(root: u64, a: u64, b: u64) -> u64 {
    let mut z =
        root.wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INFERENCE_STREAM: u64 = 1 << 63;

/// Which dispatch plans the training forward uses.
#[derive(Debug, Clone, Copy)]
pub enum PlanMode<'a> {
    /// Route every layer, seeding recycle draws from `(model seed, stream, layer)`.
    Route { stream: u64 },
    /// Reuse one plan per layer (assignments fixed, gate weights live).
    Fixed(&'a [DispatchPlan]),
}

struct LayerState {
    attn_norm: RmsNormState,
    x_attn: Vec<f64>,
    q_rot: Vec<f64>,
    /// Rotated keys and values; only on source layers.
    kv: Option<(Vec<f64>, Vec<f64>)>,
    attn: Vec<AttentionOutput>,
    o: Vec<f64>,
    ffn_norm: RmsNormState,
    moe: MoeForward,
}

/// Full-sequence forward intermediates for [`Model::backward`].
pub struct TrainForward {
    /// `(tokens, vocab)` logits over the concatenated batch.
    pub logits: Vec<f64>,
    pub ce_loss: f64,
    /// Sum over layers of the unweighted load-balance loss.
    pub balance_loss: f64,
    /// `ce_loss + aux_loss_coef * balance_loss`.
    pub objective: f64,
    layers: Vec<LayerState>,
    final_norm: RmsNormState,
    x_final: Vec<f64>,
    tokens: Vec<usize>,
    spans: Vec<(usize, usize)>,
    predictions: usize,
}

impl TrainForward {
    pub fn plans(&self) -> Vec<DispatchPlan> {
        self.layers.iter().map(|l| l.moe.plan.clone()).collect()
    }

    pub fn load_stats(&self) -> LoadStats {
        let mut total = LoadStats { experts: Vec::new(), primary: 0, recycled: 0, dropped: 0, slots: 0 };
        for l in &self.layers {
            total.merge(&expert_load_stats(&l.moe.plan));
        }
        total
    }
}

/// Output of the cached (inference) forward.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// `(new tokens, vocab)` logits.
    pub logits: Vec<f64>,
    /// Dispatch plan of each layer for the new tokens.
    pub plans: Vec<DispatchPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub weights: Weights,
}

pub fn build_model(config: &ModelConfig) -> Result<Model, ModelError> {
    Model::new(config.clone())
}

impl Model {
    /// Scaled-normal initialisation (`std = 1 / sqrt(hidden)`), norms at 1.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate_buildable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_size;
        let kv_dim = config.kv_groups * config.head_dim;
        let std = 1.0 / (h as f64).sqrt();
        let embed = Tensor::randn(config.vocab_size, h, std, &mut rng);
        let layers = (0..config.layers)
            .map(|layer| {
                let attn_norm = Tensor::filled(1, h, 1.0);
                let wq = Tensor::randn(h, h, std, &mut rng);
                let kv = config.is_source_layer(layer).then(|| KvProjection {
                    wk: Tensor::randn(kv_dim, h, std, &mut rng),
                    wv: Tensor::randn(kv_dim, h, std, &mut rng),
                });
                let wo = Tensor::randn(h, h, std, &mut rng);
                let ffn_norm = Tensor::filled(1, h, 1.0);
                let ffn = MoeFfn::init(h, config.ffn_hidden_size, &config.routing, std, &mut rng);
                LayerWeights { attn_norm, wq, kv, wo, ffn_norm, ffn }
            })
            .collect();
        let final_norm = Tensor::filled(1, h, 1.0);
        let lm_head = Tensor::randn(config.vocab_size, h, std, &mut rng);
        Ok(Self { config, weights: Weights { embed, layers, final_norm, lm_head } })
    }

    /// Wraps externally supplied weights (e.g. from a checkpoint).
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self, ModelError> {
        config.validate_buildable()?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::InvalidToken { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Vec<f64> {
        tokens.iter().flat_map(|&t| self.weights.embed.row(t).iter().copied()).collect()
    }

    fn rotate_rows(&self, x: &mut [f64], start: usize, heads: usize, inverse: bool) {
        let d = self.config.head_dim;
        let freqs = rope_frequencies(&self.config.rope);
        for (i, tok) in x.chunks_exact_mut(heads * d).enumerate() {
            let pos = (start + i) as f64;
            for head in tok.chunks_exact_mut(d) {
                rotate_in_place(head, if inverse { -pos } else { pos }, &freqs);
            }
        }
    }

    /// Incremental forward through a KV cache.
    ///
    /// New tokens occupy the positions following those already cached.
    pub fn forward(&self, tokens: &[usize], cache: &mut KVCache) -> Result<InferenceOutput, ModelError> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        self.check_tokens(tokens)?;
        if *cache.layout() != cfg.kv_layout() {
            return Err(ModelError::ShapeMismatch("cache layout does not match the model".into()));
        }
        let start = cache.len(0)?;
        if start + tokens.len() > cache.max_seq() {
            return Err(crate::kv_attention::KvError::CapacityExceeded { max_seq: cache.max_seq() }.into());
        }
        let kv_dim = cfg.kv_groups * cfg.head_dim;
        let mut h = self.embed(tokens);
        let mut plans = Vec::with_capacity(cfg.layers);
        for (layer, w) in self.weights.layers.iter().enumerate() {
            let (x, _) = rms_norm(&h, &w.attn_norm, cfg.rms_eps);
            let q = linear(&w.wq, &x);
            if let Some(kv) = &w.kv {
                let k = linear(&kv.wk, &x);
                let v = linear(&kv.wv, &x);
                for (kt, vt) in k.chunks_exact(kv_dim).zip(v.chunks_exact(kv_dim)) {
                    cache.append_kv(layer, kt, vt)?;
                }
            }
            let att = attention_forward(&q, cache, layer, &cfg.rope)?;
            let o = linear(&w.wo, &att.out);
            h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let (x2, _) = rms_norm(&h, &w.ffn_norm, cfg.rms_eps);
            let seed = mix_seed(cfg.seed, INFERENCE_STREAM | start as u64, layer as u64);
            let (y, moe) = w.ffn.forward(&x2, &cfg.routing, PlanSource::Route { seed })?;
            h.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
            plans.push(moe.plan);
        }
        let (xf, _) = rms_norm(&h, &self.weights.final_norm, cfg.rms_eps);
        Ok(InferenceOutput { logits: linear(&self.weights.lm_head, &xf), plans })
    }

    /// Full-sequence causal forward over a batch of sequences, keeping what the
    /// backward pass needs. Every position except the last of each sequence
    /// predicts its successor.
    pub fn forward_train(&self, sequences: &[Vec<usize>], mode: PlanMode<'_>) -> Result<TrainForward, ModelError> {
        let cfg = &self.config;
        if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2) {
            return Err(ModelError::EmptyBatch);
        }
        if let PlanMode::Fixed(p) = mode {
            if p.len() != cfg.layers {
                return Err(ModelError::ShapeMismatch(format!("{} plans for {} layers", p.len(), cfg.layers)));
            }
        }
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(sequences.len());
        for s in sequences {
            self.check_tokens(s)?;
            spans.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        let (n_h, n_g, d_h) = (cfg.heads, cfg.kv_groups, cfg.head_dim);
        let hsz = cfg.hidden_size;
        let kv_dim = n_g * d_h;

        let mut h = self.embed(&tokens);
        let mut states: Vec<LayerState> = Vec::with_capacity(cfg.layers);
        for (layer, w) in self.weights.layers.iter().enumerate() {
            let (x_attn, attn_norm) = rms_norm(&h, &w.attn_norm, cfg.rms_eps);
            let mut q_rot = linear(&w.wq, &x_attn);
            for &(s, len) in &spans {
                self.rotate_rows(&mut q_rot[s * hsz..(s + len) * hsz], 0, n_h, false);
            }
            let kv = w.kv.as_ref().map(|kv| {
                let mut k = linear(&kv.wk, &x_attn);
                for &(s, len) in &spans {
                    self.rotate_rows(&mut k[s * kv_dim..(s + len) * kv_dim], 0, n_g, false);
                }
                (k, linear(&kv.wv, &x_attn))
            });
            let src = layer - layer % cfg.share_period;
            let (k_rot, v) = match &kv {
                Some((k, v)) => (k, v),
                None => {
                    let (k, v) = states[src].kv.as_ref().expect("source layer caches K/V");
                    (k, v)
                }
            };
            let mut attn = Vec::with_capacity(spans.len());
            let mut att_out = vec![0.0; tokens.len() * hsz];
            for &(s, len) in &spans {
                let a = attend(
                    &q_rot[s * hsz..(s + len) * hsz],
                    &k_rot[s * kv_dim..(s + len) * kv_dim],
                    &v[s * kv_dim..(s + len) * kv_dim],
                    n_h,
                    n_g,
                    d_h,
                    0,
                );
                att_out[s * hsz..(s + len) * hsz].copy_from_slice(&a.out);
                attn.push(a);
            }
            let o_proj = linear(&w.wo, &att_out);
            h.iter_mut().zip(&o_proj).for_each(|(a, b)| *a += b);

            let (x_ffn, ffn_norm) = rms_norm(&h, &w.ffn_norm, cfg.rms_eps);
            let source = match mode {
                PlanMode::Route { stream } => PlanSource::Route { seed: mix_seed(cfg.seed, stream, layer as u64) },
                PlanMode::Fixed(plans) => PlanSource::Fixed(&plans[layer]),
            };
            let (y, moe) = w.ffn.forward(&x_ffn, &cfg.routing, source)?;
            h.iter_mut().zip(&y).for_each(|(a, b)| *a += b);

            states.push(LayerState { attn_norm, x_attn, q_rot, kv, attn, o: att_out, ffn_norm, moe });
        }
        let (x_final, final_norm) = rms_norm(&h, &self.weights.final_norm, cfg.rms_eps);
        let logits = linear(&self.weights.lm_head, &x_final);

        let vocab = cfg.vocab_size;
        let mut ce = 0.0;
        let mut predictions = 0;
        for &(s, len) in &spans {
            for p in s..s + len - 1 {
                let row = &logits[p * vocab..(p + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                ce += lse - row[tokens[p + 1]];
                predictions += 1;
            }
        }
        let ce_loss = ce / predictions as f64;
        let balance_loss: f64 = states.iter().map(|s| s.moe.balance_loss).sum();
        Ok(TrainForward {
            logits,
            ce_loss,
            balance_loss,
            objective: ce_loss + cfg.aux_loss_coef * balance_loss,
            layers: states,
            final_norm,
            x_final,
            tokens,
            spans,
            predictions,
        })
    }

    /// Gradient of [`TrainForward::objective`] with respect to every weight.
    pub fn backward(&self, fwd: &TrainForward) -> Result<Weights, ModelError> {
        let cfg = &self.config;
        let (n_h, n_g, d_h) = (cfg.heads, cfg.kv_groups, cfg.head_dim);
        let hsz = cfg.hidden_size;
        let kv_dim = n_g * d_h;
        let vocab = cfg.vocab_size;
        let total = fwd.tokens.len();
        if fwd.layers.len() != cfg.layers {
            return Err(ModelError::MissingForwardState);
        }
        let mut grads = self.weights.zeros_like();

        let mut dlogits = vec![0.0; total * vocab];
        let inv = 1.0 / fwd.predictions as f64;
        for &(s, len) in &fwd.spans {
            for p in s..s + len - 1 {
                let row = &fwd.logits[p * vocab..(p + 1) * vocab];
                let d = &mut dlogits[p * vocab..(p + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for (di, &v) in d.iter_mut().zip(row) {
                    *di = (v - max).exp() / z * inv;
                }
                d[fwd.tokens[p + 1]] -= inv;
            }
        }
        let dxf = linear_backward(&self.weights.lm_head, &fwd.x_final, &dlogits, &mut grads.lm_head);
        let mut dh = rms_norm_backward(&fwd.final_norm, &self.weights.final_norm, &dxf, &mut grads.final_norm);

        // dK/dV (rotated) accumulated per source layer from every reader.
        let mut dkv: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; cfg.layers];
        for layer in (0..cfg.layers).rev() {
            let w = &self.weights.layers[layer];
            let st = &fwd.layers[layer];
            let g = &mut grads.layers[layer];

            let (ffn_grads, dx_ffn) = w.ffn.backward(&st.moe, &dh, cfg.aux_loss_coef)?;
            g.ffn = ffn_grads;
            let dnorm = rms_norm_backward(&st.ffn_norm, &w.ffn_norm, &dx_ffn, &mut g.ffn_norm);
            dh.iter_mut().zip(&dnorm).for_each(|(a, b)| *a += b);

            let datt = linear_backward(&w.wo, &st.o, &dh, &mut g.wo);
            let src = layer - layer % cfg.share_period;
            let (k_rot, v) = fwd.layers[src].kv.as_ref().ok_or(ModelError::MissingForwardState)?;
            let acc = dkv[src].get_or_insert_with(|| (vec![0.0; total * kv_dim], vec![0.0; total * kv_dim]));
            let mut dq = vec![0.0; total * hsz];
            for (&(s, len), a) in fwd.spans.iter().zip(&st.attn) {
                let (dqs, dks, dvs) = attend_backward(
                    &st.q_rot[s * hsz..(s + len) * hsz],
                    &k_rot[s * kv_dim..(s + len) * kv_dim],
                    &v[s * kv_dim..(s + len) * kv_dim],
                    a,
                    &datt[s * hsz..(s + len) * hsz],
                    n_h,
                    n_g,
                    d_h,
                    0,
                );
                dq[s * hsz..(s + len) * hsz].copy_from_slice(&dqs);
                acc.0[s * kv_dim..(s + len) * kv_dim].iter_mut().zip(&dks).for_each(|(x, y)| *x += y);
                acc.1[s * kv_dim..(s + len) * kv_dim].iter_mut().zip(&dvs).for_each(|(x, y)| *x += y);
            }
            for &(s, len) in &fwd.spans {
                self.rotate_rows(&mut dq[s * hsz..(s + len) * hsz], 0, n_h, true);
            }
            let mut dx_attn = linear_backward(&w.wq, &st.x_attn, &dq, &mut g.wq);
            if let (Some(kv), Some(gkv)) = (&w.kv, g.kv.as_mut()) {
                let (mut dk, dv) = dkv[layer].take().ok_or(ModelError::MissingForwardState)?;
                for &(s, len) in &fwd.spans {
                    self.rotate_rows(&mut dk[s * kv_dim..(s + len) * kv_dim], 0, n_g, true);
                }
                let dxk = linear_backward(&kv.wk, &st.x_attn, &dk, &mut gkv.wk);
                let dxv = linear_backward(&kv.wv, &st.x_attn, &dv, &mut gkv.wv);
                for ((a, b), c) in dx_attn.iter_mut().zip(dxk).zip(dxv) {
                    *a += b + c;
                }
            }
            let dnorm = rms_norm_backward(&st.attn_norm, &w.attn_norm, &dx_attn, &mut g.attn_norm);
            dh.iter_mut().zip(&dnorm).for_each(|(a, b)| *a += b);
        }
        for (t, &tok) in fwd.tokens.iter().enumerate() {
            for (a, b) in grads.embed.row_mut(tok).iter_mut().zip(&dh[t * hsz..(t + 1) * hsz]) {
                *a += b;
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.seed = 5;
        c
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(&toy()).unwrap();
        let b = build_model(&toy()).unwrap();
        assert_eq!(a, b);
        let mut c = toy();
        c.seed = 6;
        assert_ne!(build_model(&c).unwrap().weights, a.weights);
    }

    #[test]
    fn allocated_count_matches_closed_form() {
        let m = build_model(&toy()).unwrap();
        assert_eq!(m.param_count() as u64, toy().param_count());
    }

    #[test]
    fn non_source_layers_have_no_kv_projection() {
        let m = build_model(&toy()).unwrap();
        assert!(m.weights.layers[0].kv.is_some());
        assert!(m.weights.layers[1].kv.is_none());
    }

    #[test]
    fn invalid_token_rejected() {
        let m = build_model(&toy()).unwrap();
        let mut cache = KVCache::new(toy().kv_layout(), 4).unwrap();
        assert!(matches!(m.forward(&[99], &mut cache), Err(ModelError::InvalidToken { token: 99, .. })));
    }

    #[test]
    fn cache_overflow_rejected_before_mutation() {
        let m = build_model(&toy()).unwrap();
        let mut cache = KVCache::new(toy().kv_layout(), 2).unwrap();
        let err = m.forward(&[1, 2, 3], &mut cache).unwrap_err();
        assert_eq!(err.code(), "capacity_exceeded");
        assert!(cache.is_empty());
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(mix_seed(1, 0, 0), mix_seed(1, 0, 1));
        assert_ne!(mix_seed(1, 1, 0), mix_seed(1, 0, 1));
    }
}
