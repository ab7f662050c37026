use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares an analytic gradient against central differences.
///
/// `f` returns `(loss, gradient)` at a point. The error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`; the maximum is reported.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_with_skip(f, point, h, |_| false)
}

/// As [`grad_check`], ignoring coordinates for which `skip` is true (e.g.
/// weights feeding a ReLU whose pre-activation sits within reach of the kink).
pub fn grad_check_with_skip<F, S>(mut f: F, point: &[f64], h: f64, skip: S) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    S: Fn(usize) -> bool,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let (loss, analytic) = f(point);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape("analytic gradient", point.len(), analytic.len()));
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for i in 0..point.len() {
        if skip(i) {
            report.skipped += 1;
            continue;
        }
        x[i] = point[i] + h;
        let (plus, _) = f(&x);
        x[i] = point[i] - h;
        let (minus, _) = f(&x);
        x[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> (f64, Vec<f64>) {
        let loss = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
        let grad = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        (loss, grad)
    }

    #[test]
    fn exact_quadratic_gradient_passes() {
        let r = grad_check(quadratic, &[0.3, -1.2, 2.0, 0.0], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn doubled_gradient_is_detected() {
        let wrong = |x: &[f64]| {
            let (l, g) = quadratic(x);
            (l, g.into_iter().map(|v| 2.0 * v).collect())
        };
        // Large coordinates so the relative term dominates: |2g - g| / |2g| = 0.5.
        let r = grad_check(wrong, &[3.0, -4.0, 5.0], 1e-5).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_perturbed_loss_is_an_error() {
        let f = |x: &[f64]| (if x[0] > 0.0 { f64::NAN } else { 0.0 }, vec![0.0]);
        assert!(matches!(grad_check(f, &[0.0], 1e-5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(quadratic, &[1.0], 0.0).is_err());
    }

    #[test]
    fn skipped_coordinates_are_counted() {
        let r = grad_check_with_skip(quadratic, &[1.0, 2.0, 3.0], 1e-5, |i| i == 1).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
    }
}
