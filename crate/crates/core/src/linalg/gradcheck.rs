//! Central finite-difference check of analytic gradients.

/// Largest relative disagreement between the analytic gradient of `f` at
/// `point` and a central difference with step `step`.
///
/// `f` returns the value and its analytic gradient. The error for coordinate
/// `i` is `|analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1e-6·max(|f|, 1))`:
/// entries too small for a central difference to resolve against the
/// rounding error of `f` are judged on absolute error.
pub fn finite_diff_check<F>(f: F, point: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(point);
    let floor = 1e-6 * value.abs().max(1.0);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (up, _) = f(&probe);
        probe[i] = point[i] - step;
        let (down, _) = f(&probe);
        probe[i] = point[i];
        let fd = (up - down) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let err = finite_diff_check(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[1.0], 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_has_zero_error() {
        let err = finite_diff_check(|_| (4.0, vec![0.0, 0.0]), &[0.3, -2.0], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let err = finite_diff_check(|x| (x[0] * x[0], vec![3.0 * x[0]]), &[1.0], 1e-5);
        assert!(err > 0.3);
    }
}
