//! Central finite-difference validation of analytic gradients.

use super::matrix::Matrix;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::Real;

/// Value and analytic gradients of an objective at one parameter point.
/// `gradients` aligns with the parameter slice by position and shape.
#[derive(Debug, Clone)]
pub struct Evaluation<F: Scalar = Real> {
    pub value: F,
    pub gradients: Vec<Matrix<F>>,
}

/// Denominator floor; below this both gradients are treated as zero-scale.
const REL_FLOOR: f64 = 1e-12;

/// Compares the objective's analytic gradients against central differences
/// and returns the worst relative error over all coordinates:
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
///
/// The objective is evaluated once at `params` for the analytic gradients,
/// then twice per coordinate for the differences.
pub fn finite_diff_check<F, O>(objective: O, params: &[Matrix<F>], step: F) -> Result<F>
where
    F: Scalar,
    O: Fn(&[Matrix<F>]) -> Result<Evaluation<F>>,
{
    if step <= F::zero() {
        return Err(Error::parameter("step", format!("must be > 0, got {step}")));
    }
    if params.is_empty() {
        return Err(Error::parameter(
            "params",
            "need at least one parameter matrix",
        ));
    }

    let base = objective(params)?;
    if !base.value.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    if base.gradients.len() != params.len() {
        return Err(Error::Contract(format!(
            "objective returned {} gradients for {} parameters",
            base.gradients.len(),
            params.len()
        )));
    }
    for (i, (g, p)) in base.gradients.iter().zip(params).enumerate() {
        if !g.same_shape(p) {
            return Err(Error::Contract(format!(
                "gradient {i} has shape {}x{}, parameter is {}x{}",
                g.rows(),
                g.cols(),
                p.rows(),
                p.cols()
            )));
        }
    }

    let floor = F::from_f64(REL_FLOOR).unwrap();
    let two = F::one() + F::one();
    let mut work: Vec<Matrix<F>> = params.to_vec();
    let mut worst = F::zero();

    for pi in 0..params.len() {
        for r in 0..params[pi].rows() {
            for c in 0..params[pi].cols() {
                let orig = work[pi].get(r, c);

                work[pi].set(r, c, orig + step);
                let plus = objective(&work)?.value;
                work[pi].set(r, c, orig - step);
                let minus = objective(&work)?.value;
                work[pi].set(r, c, orig);

                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite("objective value".into()));
                }

                let central = (plus - minus) / (two * step);
                let analytic = base.gradients[pi].get(r, c);
                let denom = analytic.abs().max(central.abs()).max(floor);
                let err = (analytic - central).abs() / denom;
                if err > worst {
                    worst = err;
                }
            }
        }
    }
    Ok(worst)
}
