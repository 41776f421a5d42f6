use serde::{Deserialize, Serialize};

use super::KvError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeParams {
    pub base: f64,
    pub d_h: usize,
}

impl RopeParams {
    pub const DEFAULT_BASE: f64 = 10_000.0;
    /// Base used for the 256K long-context stage.
    pub const LONG_CONTEXT_BASE: f64 = 1e9;

    pub fn new(base: f64, d_h: usize) -> Result<Self, KvError> {
        let p = Self { base, d_h };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), KvError> {
        if self.d_h == 0 || !self.d_h.is_multiple_of(2) {
            return Err(KvError::InvalidRope(format!("d_h must be even and positive, got {}", self.d_h)));
        }
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(KvError::InvalidRope(format!("base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }
}

/// `theta_i = base^(-2i / d_h)` for `i in 0..d_h/2`.
pub fn rope_frequencies(params: &RopeParams) -> Vec<f64> {
    let d = params.d_h as f64;
    (0..params.d_h / 2).map(|i| params.base.powf(-2.0 * i as f64 / d)).collect()
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `position * theta_i`.
///
/// `position` is real so the inverse rotation (`-position`) is available to the
/// backward pass.
pub fn rotate_in_place(x: &mut [f64], position: f64, freqs: &[f64]) {
    for (pair, &theta) in x.chunks_exact_mut(2).zip(freqs) {
        let (sin, cos) = (position * theta).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

pub fn apply_rope(vec: &[f64], position: usize, params: &RopeParams) -> Result<Vec<f64>, KvError> {
    params.validate()?;
    if vec.len() != params.d_h {
        return Err(KvError::ShapeMismatch(format!("vector of length {} for d_h {}", vec.len(), params.d_h)));
    }
    let mut out = vec.to_vec();
    rotate_in_place(&mut out, position as f64, &rope_frequencies(params));
    Ok(out)
}
