use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element, if any element was checked.
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when `f` returned a non-finite value at a perturbed point.
    pub non_finite_at: Option<usize>,
}

/// Fraction of the gradient's largest magnitude below which elements are
/// compared against that scale instead of their own magnitude.
const RELATIVE_FLOOR: f64 = 1e-3;
const ABSOLUTE_FLOOR: f64 = 1e-8;

/// Checks `analytic` against `(f(x+h) − f(x−h)) / 2h` at every element of `point`.
///
/// The per-element error is `|a − n| / max(|a|, |n|, floor)` where the floor is
/// `1e-3` of the largest gradient magnitude (and never below `1e-8`), so
/// entries that are negligible next to the rest of the gradient do not turn
/// round-off into a spurious failure.
pub fn gradcheck<F>(
    mut f: F,
    analytic: &Tensor,
    point: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("gradcheck: step must be positive, got {step}")));
    }
    analytic.expect_same_shape(point, "gradcheck")?;

    let mut probe = point.clone();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let plus = f(&probe);
        probe.data_mut()[i] = x0 - step;
        let minus = f(&probe);
        probe.data_mut()[i] = x0;
        if !plus.is_finite() || !minus.is_finite() {
            return Ok(GradCheckReport {
                max_rel_error: f64::INFINITY,
                worst_index: Some(i),
                analytic_at_worst: analytic.data()[i],
                numeric_at_worst: f64::NAN,
                tolerance,
                passed: false,
                non_finite_at: Some(i),
            });
        }
        numeric.push((plus - minus) / (2.0 * step));
    }

    let scale = analytic
        .data()
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(ABSOLUTE_FLOOR);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance,
        passed: true,
        non_finite_at: None,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let err = if a.is_finite() {
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        } else {
            f64::INFINITY
        };
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
