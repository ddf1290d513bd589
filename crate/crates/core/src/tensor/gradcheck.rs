//! Finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamId};

/// `(f(+h) − f(−h)) / 2h` for a scalar perturbation function.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, step: f64) -> f64 {
    (f(step) - f(-step)) / (2.0 * step)
}

/// Relative error `|a − b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// One coordinate of a parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Coordinate {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error over smooth coordinates.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates where one-sided differences disagree: the objective
    /// has a kink (e.g. a ReLU pre-activation at 0) within the step.
    pub non_smooth: Vec<Coordinate>,
}

// Relative error above which a coordinate is re-examined with smaller steps.
const SUSPICIOUS: f64 = 1e-6;

/// Compares `analytic` gradients against central differences of `f`.
///
/// Coordinates that look wrong are retried at `step/10` and `step/100`
/// (a kink inside the wider stencil spoils the wide estimate only). If no
/// step agrees and the one-sided slopes at the finest step disagree, the
/// coordinate is reported as non-smooth and excluded from the maximum.
pub fn finite_diff_gradcheck<F>(
    params: &BTreeMap<ParamId, Matrix>,
    analytic: &BTreeMap<ParamId, Matrix>,
    step: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<ParamId, Matrix>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Validation(format!(
            "gradcheck step must be positive, got {step}"
        )));
    }
    let mut work = params.clone();
    let mut eval =
        |work: &mut BTreeMap<ParamId, Matrix>, id: ParamId, i: usize, delta: f64| -> Result<f64> {
            let base = work[&id].as_slice()[i];
            work.get_mut(&id).expect("param").as_mut_slice()[i] = base + delta;
            let v = f(work);
            work.get_mut(&id).expect("param").as_mut_slice()[i] = base;
            let v = v?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective is non-finite at param {} index {i}",
                    id.0
                )));
            }
            Ok(v)
        };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        non_smooth: Vec::new(),
    };
    for (&id, value) in params {
        let grad = analytic
            .get(&id)
            .ok_or_else(|| Error::Lookup(format!("no analytic gradient for param {}", id.0)))?;
        if grad.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape mismatch for param {}",
                id.0
            )));
        }
        for i in 0..value.len() {
            let a = grad.as_slice()[i];
            let mut best = f64::INFINITY;
            let mut h = step;
            let mut kink = false;
            for attempt in 0..3 {
                let plus = eval(&mut work, id, i, h)?;
                let minus = eval(&mut work, id, i, -h)?;
                let cd = (plus - minus) / (2.0 * h);
                best = best.min(relative_error(a, cd));
                if best <= SUSPICIOUS {
                    break;
                }
                if attempt == 2 {
                    let center = eval(&mut work, id, i, 0.0)?;
                    let fwd = (plus - center) / h;
                    let bwd = (center - minus) / h;
                    kink = relative_error(fwd, bwd) > 1e-3 && (fwd - bwd).abs() > 1e-8;
                }
                h /= 10.0;
            }
            report.checked += 1;
            let coord = Coordinate {
                param: id,
                index: i,
            };
            if kink {
                report.non_smooth.push(coord);
                continue;
            }
            if best > report.max_rel_error {
                report.max_rel_error = best;
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}
