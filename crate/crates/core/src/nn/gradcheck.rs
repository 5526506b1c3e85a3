//! Central finite-difference gradient checking. The numeric side rebuilds
//! the forward pass from scratch for every probe, so it shares nothing with
//! the reverse-mode path it validates.

/// Central finite differences of a scalar function at `x`.
pub fn finite_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Worst relative error between an analytic and a numeric gradient,
/// `|a - n| / max(1, |a|, |n|)` per coordinate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum();
        let g = finite_difference(f, &[1.0, -2.0, 3.0], 1e-5);
        let want = [2.0, -4.0, 6.0];
        assert!(max_relative_error(&want, &g) < 1e-6);
    }
}
