use crate::error::{Error, Result};

/// Denominator floor of the per-coordinate relative error, so coordinates
/// whose true derivative is zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `x` with step `h`.
pub fn finite_diff_check<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::dim(format!(
            "{} coordinates but {} analytic partials",
            x.len(),
            analytic.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        coords: x.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: 0,
        tol,
        passed: true,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check".into(),
                detail: format!("f(x±h) = ({up}, {down}) at coordinate {i}"),
            });
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_err = report.max_abs_err.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = i;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
