/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
///
/// `loss` must be a pure function of the parameter vector.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let plus = loss(&p);
            p[i] = orig - h;
            let minus = loss(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`: relative error that stays meaningful for
/// gradients near zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        for h in [1e-3, 0.5, 2.0] {
            let g = finite_diff_grad(|p| 2.0 * p[0] - 3.0 * p[1] + 1.0, &[0.25, -1.5], h);
            assert!((g[0] - 2.0).abs() < 1e-12);
            assert!((g[1] + 3.0).abs() < 1e-12);
        }
    }
}
