use super::{rope_frequencies, rotate_in_place, KVCache, KvError, RopeParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `(num_queries, n_h, d_h)` attention outputs.
    pub out: Vec<f64>,
    /// `(num_queries, n_h, num_keys)` softmax weights; masked keys hold 0.
    pub probs: Vec<f64>,
    pub num_keys: usize,
}

/// Causal scaled-dot-product GQA over already-rotated queries and keys.
///
/// `q` is `(num_queries, n_h, d_h)`; `k` and `v` are `(num_keys, n_g, d_h)`.
/// Query `i` sits at absolute position `q_start + i` and sees keys `0..=q_start + i`.
#[allow(clippy::too_many_arguments)]
pub fn attend(q: &[f64], k: &[f64], v: &[f64], n_h: usize, n_g: usize, d_h: usize, q_start: usize) -> AttentionOutput {
    let num_queries = q.len() / (n_h * d_h);
    let num_keys = k.len() / (n_g * d_h);
    let per_group = n_h / n_g;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; num_queries * n_h * num_keys];
    for i in 0..num_queries {
        let visible = q_start + i;
        for h in 0..n_h {
            let g = h / per_group;
            let qh = &q[(i * n_h + h) * d_h..(i * n_h + h + 1) * d_h];
            let row = &mut probs[(i * n_h + h) * num_keys..(i * n_h + h + 1) * num_keys];
            for (j, s) in row.iter_mut().enumerate() {
                *s = if j <= visible {
                    let kj = &k[(j * n_g + g) * d_h..(j * n_g + g + 1) * d_h];
                    qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            let oh = &mut out[(i * n_h + h) * d_h..(i * n_h + h + 1) * d_h];
            for (j, &p) in row.iter().enumerate().take(visible + 1) {
                let vj = &v[(j * n_g + g) * d_h..(j * n_g + g + 1) * d_h];
                for (o, x) in oh.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    AttentionOutput { out, probs, num_keys }
}

/// Gradients of [`attend`] with respect to its rotated queries, keys and values.
///
/// Returns `(dq, dk, dv)` shaped like `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    forward: &AttentionOutput,
    dout: &[f64],
    n_h: usize,
    n_g: usize,
    d_h: usize,
    q_start: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let num_queries = q.len() / (n_h * d_h);
    let num_keys = forward.num_keys;
    let per_group = n_h / n_g;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dscore = vec![0.0; num_keys];
    for i in 0..num_queries {
        let visible = (q_start + i + 1).min(num_keys);
        for h in 0..n_h {
            let g = h / per_group;
            let row = (i * n_h + h) * d_h..(i * n_h + h + 1) * d_h;
            let probs = &forward.probs[(i * n_h + h) * num_keys..(i * n_h + h + 1) * num_keys];
            let doh = &dout[row.clone()];
            let mut inner = 0.0;
            for j in 0..visible {
                let kv = (j * n_g + g) * d_h..(j * n_g + g + 1) * d_h;
                let dp: f64 = doh.iter().zip(&v[kv.clone()]).map(|(a, b)| a * b).sum();
                dscore[j] = dp;
                inner += probs[j] * dp;
                for (d, o) in dv[kv].iter_mut().zip(doh) {
                    *d += probs[j] * o;
                }
            }
            for j in 0..visible {
                let ds = probs[j] * (dscore[j] - inner) * scale;
                let kv = (j * n_g + g) * d_h..(j * n_g + g + 1) * d_h;
                for (d, kx) in dq[row.clone()].iter_mut().zip(&k[kv.clone()]) {
                    *d += ds * kx;
                }
                for (d, qx) in dk[kv].iter_mut().zip(&q[row.clone()]) {
                    *d += ds * qx;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Attends raw (unrotated) queries for the newest positions of `layer`'s cache.
///
/// The queries are taken to be the last `num_queries` cached positions. RoPE is
/// applied to the queries and to the cached keys at their absolute positions.
pub fn attention_forward(
    queries: &[f64],
    cache: &KVCache,
    layer: usize,
    params: &RopeParams,
) -> Result<AttentionOutput, KvError> {
    let layout = cache.layout();
    params.validate()?;
    if params.d_h != layout.d_h {
        return Err(KvError::ShapeMismatch(format!("rope d_h {} differs from cache d_h {}", params.d_h, layout.d_h)));
    }
    let (n_h, n_g, d_h) = (layout.n_h, layout.n_g, layout.d_h);
    if queries.is_empty() || !queries.len().is_multiple_of(n_h * d_h) {
        return Err(KvError::ShapeMismatch(format!(
            "{} query values do not tile (n_h, d_h) = ({n_h}, {d_h})",
            queries.len()
        )));
    }
    let len = cache.len(layer)?;
    if len == 0 {
        return Err(KvError::EmptyCache(layout.source_layer(layer)));
    }
    let num_queries = queries.len() / (n_h * d_h);
    if num_queries > len {
        return Err(KvError::ShapeMismatch(format!("{num_queries} queries but only {len} cached positions")));
    }
    let q_start = len - num_queries;
    let freqs = rope_frequencies(params);

    let mut q = queries.to_vec();
    for (i, tok) in q.chunks_exact_mut(n_h * d_h).enumerate() {
        for head in tok.chunks_exact_mut(d_h) {
            rotate_in_place(head, (q_start + i) as f64, &freqs);
        }
    }
    let mut k = cache.cached_keys(layer)?.to_vec();
    for (j, pos) in k.chunks_exact_mut(n_g * d_h).enumerate() {
        for head in pos.chunks_exact_mut(d_h) {
            rotate_in_place(head, j as f64, &freqs);
        }
    }
    Ok(attend(&q, &k, cache.cached_values(layer)?, n_h, n_g, d_h, q_start))
}
