//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v).item()
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape
        .backward(out)?
        .get(xv)
        .cloned()
        .ok_or_else(|| Error::Contract("input leaf received no gradient".into()))?;

    let eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = f(&mut tape, xv)?;
        scalar_of(&tape, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check with respect to one parameter of a store.
///
/// `f` receives a tape already bound to the (possibly perturbed) store and
/// must return a scalar.
pub fn param_grad_check<F>(store: &ParamStore, id: ParamId, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(tape.param(id))
        .cloned()
        .expect("bound parameter has a gradient");

    let eval = |delta: f64, i: usize| -> Result<f64> {
        let mut perturbed = store.clone();
        perturbed.get_mut(id).data_mut()[i] += delta;
        let mut tape = Tape::with_params(&perturbed);
        let out = f(&mut tape)?;
        scalar_of(&tape, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..store.get(id).numel() {
        let numeric = (eval(eps, i)? - eval(-eps, i)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
