//! Row-major 2-D buffers and the handful of dense kernels the model needs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y_t = W x_t` for each of the `x.len() / W.cols` rows of `x`.
pub(crate) fn linear(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = x.len() / w.cols;
    let mut y = vec![0.0; n * w.rows];
    for (xt, yt) in x.chunks_exact(w.cols).zip(y.chunks_exact_mut(w.rows)) {
        for (o, yo) in yt.iter_mut().enumerate() {
            *yo = dot(w.row(o), xt);
        }
    }
    y
}

/// Accumulates `dW += dy^T x` and returns `dx = dy W`.
pub(crate) fn linear_backward(w: &Tensor, x: &[f64], dy: &[f64], dw: &mut Tensor) -> Vec<f64> {
    let n = x.len() / w.cols;
    let mut dx = vec![0.0; n * w.cols];
    for ((xt, dyt), dxt) in x.chunks_exact(w.cols).zip(dy.chunks_exact(w.rows)).zip(dx.chunks_exact_mut(w.cols)) {
        for (o, &g) in dyt.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &xv) in dw.row_mut(o).iter_mut().zip(xt) {
                *d += g * xv;
            }
            for (d, &wv) in dxt.iter_mut().zip(w.row(o)) {
                *d += g * wv;
            }
        }
    }
    dx
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Per-row RMS normalisation state kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct RmsNormState {
    pub normed: Vec<f64>,
    pub inv_rms: Vec<f64>,
}

/// `y = x / rms(x) * weight`, row by row.
pub(crate) fn rms_norm(x: &[f64], weight: &Tensor, eps: f64) -> (Vec<f64>, RmsNormState) {
    let h = weight.cols;
    let mut y = vec![0.0; x.len()];
    let mut normed = vec![0.0; x.len()];
    let mut inv_rms = Vec::with_capacity(x.len() / h);
    for ((xt, yt), nt) in x.chunks_exact(h).zip(y.chunks_exact_mut(h)).zip(normed.chunks_exact_mut(h)) {
        let inv = 1.0 / (dot(xt, xt) / h as f64 + eps).sqrt();
        inv_rms.push(inv);
        for i in 0..h {
            nt[i] = xt[i] * inv;
            yt[i] = nt[i] * weight.data[i];
        }
    }
    (y, RmsNormState { normed, inv_rms })
}

pub(crate) fn rms_norm_backward(state: &RmsNormState, weight: &Tensor, dy: &[f64], dweight: &mut Tensor) -> Vec<f64> {
    let h = weight.cols;
    let mut dx = vec![0.0; dy.len()];
    for (t, ((dyt, nt), dxt)) in
        dy.chunks_exact(h).zip(state.normed.chunks_exact(h)).zip(dx.chunks_exact_mut(h)).enumerate()
    {
        let mut mean = 0.0;
        for i in 0..h {
            dweight.data[i] += dyt[i] * nt[i];
            mean += dyt[i] * weight.data[i] * nt[i];
        }
        mean /= h as f64;
        for i in 0..h {
            dxt[i] = (dyt[i] * weight.data[i] - nt[i] * mean) * state.inv_rms[t];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_backward_agree_with_hand_values() {
        let w = Tensor { rows: 2, cols: 3, data: vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0] };
        let x = [1.0, 1.0, 2.0];
        assert_eq!(linear(&w, &x), vec![9.0, -0.5]);
        let mut dw = w.zeros_like();
        let dx = linear_backward(&w, &x, &[1.0, 2.0], &mut dw);
        assert_eq!(dx, vec![-1.0, 3.0, 3.0]);
        assert_eq!(dw.data, vec![1.0, 1.0, 2.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for x in [-3.0, -0.2, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn rms_norm_unit_rms() {
        let w = Tensor::filled(1, 4, 1.0);
        let (y, _) = rms_norm(&[1.0, -2.0, 3.0, 0.5], &w, 0.0);
        let rms = (dot(&y, &y) / 4.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-14);
    }
}
