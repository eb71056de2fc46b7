//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Value, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compare the backward-pass gradient of a scalar function against central
/// finite differences at step `h`, returning the maximum relative error
/// over the coordinates of `x`:
///
/// `max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1e-12)`
///
/// `f` receives a fresh tape and the lifted leaf and must return a scalar
/// root on that tape.
pub fn grad_check<S, F>(f: F, x: &Value<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, Var<'t, S>) -> Result<Var<'t, S>>,
{
    if h <= S::zero() {
        return Err(Error::invalid_config("h", "step size must be positive"));
    }

    let eval = |probe: &Value<S>| -> Result<S> {
        let tape = Tape::new();
        let leaf = tape.lift(probe.clone(), true)?;
        let root = f(&tape, leaf)?;
        let v = root.value();
        if !v.is_finite() {
            return Err(Error::non_finite("grad_check probe"));
        }
        Ok(v.as_scalar())
    };

    // Analytic gradient at x.
    let tape = Tape::new();
    let leaf = tape.lift(x.clone(), true)?;
    let root = f(&tape, leaf)?;
    if !root.value().is_finite() {
        return Err(Error::non_finite("grad_check at x"));
    }
    tape.backward(root)?;
    let analytic = leaf.grad();

    let eps = S::from_f64(1e-12);
    let two = S::from_f64(2.0);
    let mut max_err = S::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (two * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(fd.abs()).max(eps);
        let err = (a - fd).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
