//! Finite-difference verification oracle for reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Reverse-mode gradient of a scalar-valued `f` at `x`.
pub fn analytic_grad<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&tape, v)?;
    let mut grads = tape.backward(y)?;
    Ok(grads
        .take(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// True when no nonzero gradient entry sits below `min_ratio` of the
/// largest. f32 finite differences cannot certify near-zero entries to any
/// relative tolerance, so checks should reroll draws that fail this.
pub fn well_conditioned(grad: &Tensor, min_ratio: f32) -> bool {
    let max_g = grad.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if max_g == 0.0 {
        return false;
    }
    grad.data()
        .iter()
        .filter(|&&v| v != 0.0)
        .all(|&v| v.abs() >= min_ratio * max_g)
}

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences, elementwise. Returns the maximum relative error with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    assert!(eps > 0.0, "grad_check eps must be positive");

    let eval = |t: &Tensor| -> Result<f32> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let y = f(&tape, v)?;
        let out = tape.value(y);
        if out.numel() != 1 {
            return Err(Error::Eval(format!(
                "grad_check target must be scalar, got {:?}",
                out.shape()
            )));
        }
        let val = out.data()[0];
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(val)
    };

    // Analytic gradient.
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&tape, v)?;
    let mut grads = tape.backward(y)?;
    let analytic = grads
        .take(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut max_rel = 0.0f32;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
