//! Central finite-difference gradient verification.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{domain_err, shape_err, Result};

/// Components whose gradients are smaller than this are compared on an
/// absolute scale of this size instead of relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst component.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error used by [`grad_check`].
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the tape gradient of scalar `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), core::slice::from_ref(x), step, tol)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(domain_err!("finite-difference step must be positive"));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let y = f(&tape, &vars)?;
        if y.value().len() != 1 {
            return Err(shape_err!("grad_check needs a scalar function"));
        }
        check_finite(y.item())?;
        y.backward()?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&tape, &vars)?.item();
        check_finite(y)?;
        Ok(y)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
        passed: true,
    };
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let x0 = x.data()[i];
            let xp = x0 + step;
            let xm = x0 - step;
            probe[k].data_mut()[i] = xp;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = xm;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / ((xp - x0) + (x0 - xm));
            let a = analytic[k].data()[i];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (k, i);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

fn check_finite(y: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(domain_err!("function is not finite at a probe point"))
    }
}
