use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, RfaError};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within `h` of the probe point.
    pub excluded: Vec<usize>,
}

/// Compares reverse-mode gradients of a scalar program against five-point central
/// differences.
///
/// `f` receives a fresh tape and the variable standing for `point`, and must return
/// a scalar on that tape.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_at(f, point, h, tol, &coords)
}

/// Like [`finite_diff_check`] but probes only the listed coordinates.
pub fn finite_diff_check_at<F>(
    f: F,
    point: &Tensor,
    h: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(x, point);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p.clone())?;
        let o = f(&mut t, v)?;
        let y = t.value(o).item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(RfaError::NonFinite("finite_diff_check"))
        }
    };

    let f0 = eval(point)?;
    let mut max_rel_err: f64 = 0.0;
    let mut excluded = Vec::new();
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            eval(&probe)
        };
        let (fp, fm, fp2, fm2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = orig;

        let right = (fp2 - f0) / (2.0 * h);
        let left = (f0 - fm2) / (2.0 * h);
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
            excluded.push(i);
            continue;
        }
        let numeric = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        checked: coords.len() - excluded.len(),
        excluded,
    })
}
