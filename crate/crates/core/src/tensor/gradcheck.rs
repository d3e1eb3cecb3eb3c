use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar graph against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`. Any
/// failure to evaluate `f` or any non-finite value makes the result
/// `f64::INFINITY`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |t: &Tensor| -> Option<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t).ok()?;
        let out = f(&mut tape, v).ok()?;
        let val = tape.scalar(out);
        val.is_finite().then_some(val)
    };

    let xg = x.clone().with_grad();
    let mut tape = Tape::new();
    let Ok(v) = tape.leaf(&xg) else {
        return Ok(f64::INFINITY);
    };
    let Ok(out) = f(&mut tape, v) else {
        return Ok(f64::INFINITY);
    };
    let Ok(grads) = tape.backward(out) else {
        return Ok(f64::INFINITY);
    };
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (Some(fp), Some(fm)) = (eval(&plus), eval(&minus)) else {
            return Ok(f64::INFINITY);
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
