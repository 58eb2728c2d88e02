//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that gradients that are zero
/// analytically compare against finite-difference noise absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of scalar `f` at `x` against the fourth-order
/// central difference `(8(f(x+ε) - f(x-ε)) - (f(x+2ε) - f(x-2ε))) / 12ε`,
/// elementwise.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.len() != 1 {
            return Err(Error::NotScalar(val.shape().to_vec()));
        }
        Ok(val.data()[0])
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let f0 = tape.value(out).data()[0];
    if eval(x)?.to_bits() != f0.to_bits() {
        return Err(Error::NonDeterministic);
    }
    tape.backward(out)?;
    let analytic = tape.grad_tensor(xv).into_data();

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |d: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + d;
            eval(&probe)
        };
        let (f1, fm1, f2, fm2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.data_mut()[i] = orig;
        numeric.push((8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * eps));
    }
    let rel_errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| rel_error(a, n)).collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
    })
}
