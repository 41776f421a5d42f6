//! MoE compute budgets, isoFLOP minima and power-law fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// FLOPs per activated parameter per token in the MoE budget model.
pub const BUDGET_PARAM_COEFF: f64 = 9.59;
/// Parameter-independent FLOPs per token (attention over long sequences).
pub const BUDGET_TOKEN_COEFF: f64 = 2.3e8;

/// `N_opt = 5.9e-3 * C_min^0.5305` (activated parameters).
pub const ACTIVATED_PARAMS_LAW: PowerLawFit = PowerLawFit { coefficient: 5.9e-3, exponent: 0.5305, residual: 0.0 };
/// `D_opt = 3.2 * C_min^0.50` (training tokens).
pub const TRAINING_TOKENS_LAW: PowerLawFit = PowerLawFit { coefficient: 3.2, exponent: 0.50, residual: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("need at least {needed} distinct points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("quadratic fit has no interior minimum (leading coefficient {0:e})")]
    NonConvex(f64),
    #[error("power law with zero exponent cannot be inverted")]
    ZeroExponent,
}

impl ScalingError {
    pub fn code(&self) -> &'static str {
        match self {
            ScalingError::InvalidInput(_) => "invalid_input",
            ScalingError::TooFewPoints { .. } => "too_few_points",
            ScalingError::NonConvex(_) => "non_convex",
            ScalingError::ZeroExponent => "zero_exponent",
        }
    }
}

type Result<T> = std::result::Result<T, ScalingError>;

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ScalingError::InvalidInput(format!("{name} must be positive, got {v}")))
    }
}

/// `C = 9.59 N D + 2.3e8 D` for `N` activated parameters and `D` tokens.
pub fn compute_budget(activated_params: f64, tokens: f64) -> Result<f64> {
    positive("N", activated_params)?;
    positive("D", tokens)?;
    Ok(BUDGET_PARAM_COEFF * activated_params * tokens + BUDGET_TOKEN_COEFF * tokens)
}

/// The dense-transformer estimate `6 N D`, for comparison.
pub fn dense_budget(params: f64, tokens: f64) -> Result<f64> {
    positive("N", params)?;
    positive("D", tokens)?;
    Ok(6.0 * params * tokens)
}

/// `C_min = C / (1 + B / B_crit)`.
pub fn min_budget(budget: f64, batch: f64, critical_batch: f64) -> Result<f64> {
    positive("B_crit", critical_batch)?;
    positive("B", batch)?;
    min_budget_from_ratio(budget, batch / critical_batch)
}

pub fn min_budget_from_ratio(budget: f64, batch_over_critical: f64) -> Result<f64> {
    positive("C", budget)?;
    positive("B / B_crit", batch_over_critical)?;
    Ok(budget / (1.0 + batch_over_critical))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopPoint {
    pub c_min: f64,
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

impl IsoFlopPoint {
    pub fn validate(&self) -> Result<()> {
        positive("c_min", self.c_min)?;
        positive("n", self.n)?;
        positive("d", self.d)?;
        positive("loss", self.loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticMinimum {
    pub x_opt: f64,
    pub loss_opt: f64,
    /// `loss ~ a x^2 + b x + c` in the caller's x coordinates.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Set when the vertex lies outside the sampled x range.
    pub extrapolated: bool,
}

/// Solves the 3x3 system `m z = r` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col] == 0.0 {
            return None;
        }
        m.swap(col, pivot);
        r.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut z = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| m[row][k] * z[k]).sum();
        z[row] = (r[row] - tail) / m[row][row];
    }
    Some(z)
}

/// Least-squares parabola through `(x, loss)` samples and its vertex.
pub fn isoflop_minimum(points: &[(f64, f64)]) -> Result<QuadraticMinimum> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(ScalingError::InvalidInput("non-finite sample".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(ScalingError::TooFewPoints { needed: 3, got: xs.len() });
    }
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    // Fit in u = (x - mid) / half so the normal equations stay well conditioned.
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut gram = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for &(x, y) in points {
        let u = (x - mid) / half;
        let basis = [u * u, u, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                gram[i][j] += basis[i] * basis[j];
            }
            rhs[i] += basis[i] * y;
        }
    }
    let [qa, qb, qc] =
        solve3(gram, rhs).ok_or_else(|| ScalingError::InvalidInput("singular quadratic design".into()))?;
    let scale = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if qa <= 1e-12 * scale {
        return Err(ScalingError::NonConvex(qa / (half * half)));
    }
    let u_opt = -qb / (2.0 * qa);
    let x_opt = mid + half * u_opt;
    let loss_opt = qc - qb * qb / (4.0 * qa);
    let a = qa / (half * half);
    let b = qb / half - 2.0 * a * mid;
    let c = qc - qb * mid / half + a * mid * mid;
    Ok(QuadraticMinimum { x_opt, loss_opt, a, b, c, extrapolated: x_opt < lo || x_opt > hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub coefficient: f64,
    pub exponent: f64,
    /// Root-mean-square residual of `ln y` about the fitted line.
    pub residual: f64,
}

/// Ordinary least squares of `ln y` on `ln C`.
pub fn fit_power_law(pairs: &[(f64, f64)]) -> Result<PowerLawFit> {
    for &(c, y) in pairs {
        positive("C_min", c)?;
        positive("y_opt", y)?;
    }
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ScalingError::TooFewPoints { needed: 2, got: distinct.len() });
    }
    let logs: Vec<(f64, f64)> = pairs.iter().map(|&(c, y)| (c.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(PowerLawFit { coefficient: intercept.exp(), exponent: slope, residual: (sse / k).sqrt() })
}

/// `y = coefficient * C^exponent`.
pub fn predict_optimal(fit: &PowerLawFit, c_min: f64) -> Result<f64> {
    positive("coefficient", fit.coefficient)?;
    positive("C_min", c_min)?;
    Ok(fit.coefficient * c_min.powf(fit.exponent))
}

/// `C = (y / coefficient)^(1 / exponent)`.
pub fn invert_power_law(fit: &PowerLawFit, y_target: f64) -> Result<f64> {
    positive("coefficient", fit.coefficient)?;
    positive("y_target", y_target)?;
    if fit.exponent == 0.0 {
        return Err(ScalingError::ZeroExponent);
    }
    Ok((y_target / fit.coefficient).powf(1.0 / fit.exponent))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsoFlopAxis {
    /// Activated parameters.
    Params,
    /// Training tokens.
    Tokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsoFlopOptimum {
    pub c_min: f64,
    /// Vertex location in `log10` units.
    pub log10_opt: f64,
    pub y_opt: f64,
    pub loss_opt: f64,
    pub samples: usize,
    pub extrapolated: bool,
}

/// Groups measurements by budget (relative tolerance 1e-9) and fits one
/// parabola in `log10 N` or `log10 D` per budget.
pub fn isoflop_optima(points: &[IsoFlopPoint], axis: IsoFlopAxis) -> Result<Vec<IsoFlopOptimum>> {
    for p in points {
        p.validate()?;
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.c_min.total_cmp(&b.c_min));
    let mut groups: Vec<Vec<IsoFlopPoint>> = Vec::new();
    for p in sorted {
        match groups.last_mut() {
            Some(g) if ((p.c_min - g[0].c_min) / g[0].c_min).abs() <= 1e-9 => g.push(p),
            _ => groups.push(vec![p]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let xy: Vec<(f64, f64)> = g
                .iter()
                .map(|p| {
                    let v = match axis {
                        IsoFlopAxis::Params => p.n,
                        IsoFlopAxis::Tokens => p.d,
                    };
                    (v.log10(), p.loss)
                })
                .collect();
            let q = isoflop_minimum(&xy)?;
            Ok(IsoFlopOptimum {
                c_min: g[0].c_min,
                log10_opt: q.x_opt,
                y_opt: 10f64.powf(q.x_opt),
                loss_opt: q.loss_opt,
                samples: g.len(),
                extrapolated: q.extrapolated,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn budget_at_reference_scale() {
        let c = compute_budget(52e9, 7e12).unwrap();
        assert!(rel(c, 3.49237e24) < 1e-4);
        assert!(rel(c, 9.59 * 52e9 * 7e12 + 2.3e8 * 7e12) < 1e-15);
        assert!(c > dense_budget(52e9, 7e12).unwrap());
    }

    #[test]
    fn budget_rejects_zero_tokens() {
        assert_eq!(compute_budget(1e9, 0.0).unwrap_err().code(), "invalid_input");
    }

    #[test]
    fn budget_linear_in_tokens() {
        let a = compute_budget(1.3e8, 2.5e10).unwrap();
        let b = compute_budget(1.3e8, 5e10).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn min_budget_cases() {
        assert_eq!(min_budget(8.0, 3.0, 3.0).unwrap(), 4.0);
        let tiny = min_budget(5.0, 1e-12, 1.0).unwrap();
        assert!(rel(tiny, 5.0) < 1e-11);
        let c = min_budget_from_ratio(3.49237e24, 0.1).unwrap();
        assert!(rel(c, 3.17488e24) < 1e-5);
        for r in [1e-6, 0.3, 5.0, 1e6] {
            let v = min_budget_from_ratio(1e20, r).unwrap();
            assert!(v > 0.0 && v < 1e20);
        }
    }

    #[test]
    fn exact_parabola_vertex() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 5.0].iter().map(|&x| (x, (x - 3.0f64).powi(2) + 1.0)).collect();
        let q = isoflop_minimum(&pts).unwrap();
        assert!((q.x_opt - 3.0).abs() < 1e-9);
        assert!((q.loss_opt - 1.0).abs() < 1e-9);
        assert!((q.a - 1.0).abs() < 1e-9 && (q.b + 6.0).abs() < 1e-9 && (q.c - 10.0).abs() < 1e-9);
        assert!(!q.extrapolated);
    }

    #[test]
    fn collinear_is_non_convex() {
        let pts = [(1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 5.0)];
        assert_eq!(isoflop_minimum(&pts).unwrap_err().code(), "non_convex");
        let concave = [(1.0, 1.0), (2.0, 2.0), (3.0, 1.0)];
        assert!(isoflop_minimum(&concave).is_err());
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = [(1.0, 2.0), (1.0, 3.0), (2.0, 4.0)];
        assert_eq!(isoflop_minimum(&pts).unwrap_err(), ScalingError::TooFewPoints { needed: 3, got: 2 });
    }

    #[test]
    fn extrapolated_vertex_is_flagged() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 3.0].iter().map(|&x| (x, (x - 7.0f64).powi(2))).collect();
        let q = isoflop_minimum(&pts).unwrap();
        assert!(q.extrapolated);
        assert!((q.x_opt - 7.0).abs() < 1e-8);
    }

    #[test]
    fn noisy_parabola_vertex_within_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = 9.3;
        let pts: Vec<(f64, f64)> = (0..15)
            .map(|i| {
                let x = 8.0 + 0.2 * i as f64;
                let noise: f64 = rng.sample(StandardNormal);
                (x, 0.4 * (x - truth).powi(2) + 2.1 + 1e-3 * noise)
            })
            .collect();
        let q = isoflop_minimum(&pts).unwrap();
        assert!(rel(q.x_opt, truth) < 0.01);
    }

    #[test]
    fn vertex_invariant_under_loss_shift() {
        let pts = [(1.0, 3.1), (2.0, 2.2), (3.0, 2.0), (4.5, 2.9)];
        let shifted: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, y + 17.0)).collect();
        let a = isoflop_minimum(&pts).unwrap();
        let b = isoflop_minimum(&shifted).unwrap();
        assert!((a.x_opt - b.x_opt).abs() < 1e-12);
    }

    #[test]
    fn power_law_round_trip() {
        for law in [ACTIVATED_PARAMS_LAW, TRAINING_TOKENS_LAW] {
            let pairs: Vec<(f64, f64)> = (0..8)
                .map(|i| {
                    let c = 10f64.powf(18.0 + 0.5 * i as f64);
                    (c, law.coefficient * c.powf(law.exponent))
                })
                .collect();
            let fit = fit_power_law(&pairs).unwrap();
            assert!(rel(fit.coefficient, law.coefficient) < 1e-9, "{fit:?}");
            assert!(rel(fit.exponent, law.exponent) < 1e-9);
            assert!(fit.residual < 1e-12);
        }
    }

    #[test]
    fn two_points_interpolate() {
        let fit = fit_power_law(&[(10.0, 3.0), (1000.0, 30.0)]).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
        assert!(rel(predict_optimal(&fit, 10.0).unwrap(), 3.0) < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_power_law(&[(10.0, 3.0)]).is_err());
        assert!(fit_power_law(&[(10.0, 3.0), (10.0, 4.0)]).is_err());
        assert!(fit_power_law(&[(10.0, -3.0), (100.0, 4.0)]).is_err());
    }

    #[test]
    fn predict_and_invert() {
        let f = PowerLawFit { coefficient: 3.2, exponent: 0.5, residual: 0.0 };
        assert!((predict_optimal(&f, 4.0).unwrap() - 6.4).abs() < 1e-15);
        for c in [1e3, 3.3e17, 8e24] {
            let back =
                invert_power_law(&ACTIVATED_PARAMS_LAW, predict_optimal(&ACTIVATED_PARAMS_LAW, c).unwrap()).unwrap();
            assert!(rel(back, c) < 1e-12);
        }
        let flat = PowerLawFit { exponent: 0.0, ..f };
        assert_eq!(invert_power_law(&flat, 2.0).unwrap_err(), ScalingError::ZeroExponent);
    }

    #[test]
    fn cross_law_consistency() {
        let c = invert_power_law(&ACTIVATED_PARAMS_LAW, 58.1e9).unwrap();
        assert!(rel(c, 3.11e24) < 0.01);
        let d = predict_optimal(&TRAINING_TOKENS_LAW, c).unwrap();
        assert!(rel(d, 5.6e12) < 0.01);
    }

    #[test]
    fn isoflop_pipeline_recovers_optima() {
        let mut pts = Vec::new();
        for (c, n_opt) in [(1e18, 1e7), (1e19, 3e7), (1e20, 1e8)] {
            for k in -2..=2 {
                let log_n = f64::log10(n_opt) + 0.25 * k as f64;
                let loss = 3.0 + 0.3 * (log_n - f64::log10(n_opt)).powi(2);
                pts.push(IsoFlopPoint { c_min: c, n: 10f64.powf(log_n), d: c / 10f64.powf(log_n), loss });
            }
        }
        let opt = isoflop_optima(&pts, IsoFlopAxis::Params).unwrap();
        assert_eq!(opt.len(), 3);
        assert!(rel(opt[1].y_opt, 3e7) < 1e-9);
        assert_eq!(opt[2].samples, 5);
    }
}
