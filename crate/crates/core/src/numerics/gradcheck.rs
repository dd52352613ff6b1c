//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point and must return a single-element node. The result is
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::contract(format!(
            "grad_check step must be positive, got {step}"
        )));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let y = f(&mut tape, x)?;
        scalar_out(&tape, y)
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    scalar_out(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_out(tape: &Tape, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}
