use super::tape::{NodeId, Tape};
use super::tensor::TensorBuf;
use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Outcome of comparing tape gradients to central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Checks `build`'s gradient at `point` against central differences.
///
/// `build` receives a fresh tape and the parameter node holding the point and
/// returns the scalar loss node. A coordinate passes when its absolute error or
/// its relative error `|a - n| / max(|a|, |n|)` is within `tol`.
pub fn grad_check<S, F>(build: F, point: &TensorBuf<S>, step: S, tol: S) -> Result<GradCheckReport>
where
    S: Real,
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId>,
{
    if step <= S::zero() || tol <= S::zero() {
        return invalid("grad_check needs positive step and tolerance");
    }
    let eval = |p: TensorBuf<S>| -> Result<S> {
        let mut tape = Tape::new();
        let x = tape.parameter(p);
        let loss = build(&mut tape, x)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return invalid(format!("checked function returned shape {:?}", value.dims()));
        }
        Ok(value.data()[0])
    };

    let mut tape = Tape::new();
    let x = tape.parameter(point.clone());
    let loss = build(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("backward filled every node").to_vec();

    let two = S::lit(2.0);
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    let mut pass = true;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let abs = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel = if scale > S::zero() { abs / scale } else { S::zero() };
        max_abs = max_abs.max(abs.as_f64());
        max_rel = max_rel.max(rel.as_f64());
        if abs > tol && rel > tol {
            pass = false;
        }
    }
    Ok(GradCheckReport { max_abs_error: max_abs, max_rel_error: max_rel, pass })
}
