use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences at `point`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of `point`.
pub fn grad_check<F>(function: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = function(&tape, x)?;
    let value = tape.value(root).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let analytic = tape.backward(root)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p);
        let y = function(&tape, x)?;
        let v = tape.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
