//! Central-difference oracles.

use super::Rng;
use crate::error::{Error, Result};

/// Default step for first differences of a scalar function.
pub const GRAD_STEP: f64 = 1e-5;
/// Default step for differences of an analytic gradient.
pub const HESS_STEP: f64 = 1e-4;

/// Central-difference gradient of `f` at `w`.
pub fn finite_diff_gradient<F>(f: F, w: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = f(&probe);
        probe[i] = w[i] - h;
        let down = f(&probe);
        probe[i] = w[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle { index: i, reason: "non-finite function value".into() });
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Diagonal of the Hessian from central differences of an analytic gradient.
pub fn finite_diff_hessian_diag<G>(grad: G, w: &[f64], h: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let all: Vec<usize> = (0..w.len()).collect();
    finite_diff_hessian_diag_subset(grad, w, &all, h)
}

/// Like [`finite_diff_hessian_diag`] but only for the coordinates in `indices`.
pub fn finite_diff_hessian_diag_subset<G>(grad: G, w: &[f64], indices: &[usize], h: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = w.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        probe[i] = w[i] + h;
        let up = grad(&probe)[i];
        probe[i] = w[i] - h;
        let down = grad(&probe)[i];
        probe[i] = w[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle { index: i, reason: "non-finite gradient".into() });
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Vector of independent ±1 entries.
pub fn rademacher_vector(n: usize, rng: &mut Rng) -> Vec<f64> {
    assert!(n >= 1, "rademacher_vector needs n >= 1");
    (0..n).map(|_| rng.rademacher()).collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Scalar relative error with the same floor as [`relative_error`].
pub fn relative_error_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let g = finite_diff_gradient(|w| w[0] * w[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-9);
    }

    #[test]
    fn linear_gradient_is_constant() {
        let (c, d) = (2.5, -1.0);
        for w in [-3.0, 0.0, 11.0] {
            let g = finite_diff_gradient(|w| c * w[0] + d, &[w], 1e-5).unwrap();
            assert!((g[0] - c).abs() <= 1e-9);
        }
    }

    #[test]
    fn diagonal_quadratic_hessian() {
        let grad = |w: &[f64]| vec![w[0], 3.0 * w[1]];
        let d = finite_diff_hessian_diag(grad, &[0.3, -0.7], 1e-4).unwrap();
        assert!((d[0] - 1.0).abs() <= 1e-9 && (d[1] - 3.0).abs() <= 1e-9);
        assert!((d.iter().sum::<f64>() - 4.0).abs() <= 1e-9);
    }

    #[test]
    fn linear_has_zero_hessian() {
        let grad = |_: &[f64]| vec![1.0, -2.0, 0.5];
        let d = finite_diff_hessian_diag(grad, &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert!(d.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn non_finite_reports_index() {
        let err = finite_diff_gradient(|w| if w[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Oracle { index: 1, .. }));
    }

    #[test]
    fn rademacher_properties() {
        let mut a = Rng::new(11);
        let mut b = Rng::new(11);
        let v = rademacher_vector(4, &mut a);
        assert_eq!(v, rademacher_vector(4, &mut b));
        assert_eq!(v.iter().map(|x| x * x).sum::<f64>(), 4.0);
        let big = rademacher_vector(100_000, &mut a);
        let mean = big.iter().sum::<f64>() / big.len() as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
    }
}
