use super::{sup_norm, Scalar};
use crate::error::{invalid, Result, VpoError};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient `(f(θ + h e_i) − f(θ − h e_i)) / 2h`.
///
/// Independent of any analytic gradient code; it only evaluates `f`.
pub fn finite_diff_grad<T, F>(f: F, theta: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    if !(h > T::zero()) {
        return Err(invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(VpoError::NonFinite {
                index: i,
                context: format!("objective evaluation gave {up} / {down}"),
            });
        }
        grad.push((up - down) / (h + h));
    }
    Ok(grad)
}

/// `‖a − b‖∞ / max(1, ‖a‖∞)`.
pub fn relative_sup_error<T: Scalar>(analytic: &[T], reference: &[T]) -> T {
    assert_eq!(analytic.len(), reference.len(), "gradient lengths differ");
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()));
    diff / sup_norm(analytic).max(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|t: &[f64]| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_grad(|_: &[f64]| 3.5, &[0.1, -0.2, 7.0], 1e-5).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reports_offending_index() {
        let f = |t: &[f64]| if t[1] > 0.5 { f64::NAN } else { t[0] };
        match finite_diff_grad(f, &[0.0, 0.5], 1e-3) {
            Err(VpoError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(finite_diff_grad(|_: &[f64]| 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_metric() {
        assert_eq!(relative_sup_error(&[0.5_f64, 0.0], &[0.5, 0.25]), 0.25);
        assert_eq!(relative_sup_error(&[4.0_f64], &[3.0]), 0.25);
    }
}
