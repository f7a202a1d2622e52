//! Central finite-difference gradient checking.
//!
//! This is the independent oracle used by the gradient tests: analytic
//! adjoints from the tape are compared against `(f(x+h) - f(x-h)) / 2h`
//! computed through a fresh forward evaluation.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative mismatch between `analytic` and `numeric`.
///
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// near-zero components from dominating the comparison.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Check one scalar function's gradient; returns the max relative error.
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> f64 {
    let numeric = central_diff(f, x, h);
    max_rel_error(analytic, &numeric, floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let x = [2.0, -1.0];
        let analytic = [2.0 * x[0] + 3.0 * x[1], 3.0 * x[0]];
        let err = check_gradient(&mut f, &x, &analytic, 1e-5, 1e-8);
        assert!(err < 1e-8, "rel err {}", err);
    }
}
