//! Central finite-difference verification of analytic gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per element, one vector per input.
    pub errors: Vec<Vec<f64>>,
    pub max_rel_error: f64,
    /// `(input, element)` holding the largest error.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares the reverse-mode gradient of the scalar `f` against central
/// differences with the given `step` at every input element.
pub fn grad_check<S, F>(f: F, inputs: &[Tensor<S>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let analytic: Vec<Tensor<S>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        check_finite("output", out.value().data())?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |probe: &[Tensor<S>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item().as_f64())
    };

    let mut probe: Vec<Tensor<S>> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (i, input) in inputs.iter().enumerate() {
        check_finite(&format!("gradient of input {i}"), analytic[i].data())?;
        let mut errs = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + S::lit(step);
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - S::lit(step);
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            if !fd.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite difference of input {i}"),
                    index: j,
                });
            }
            let e = relative_error(analytic[i].data()[j].as_f64(), fd);
            if e > max_rel_error {
                max_rel_error = e;
                worst = (i, j);
            }
            errs.push(e);
        }
        errors.push(errs);
    }
    Ok(GradCheckReport {
        errors,
        max_rel_error,
        worst,
        tolerance: tol,
    })
}

fn check_finite<S: Scalar>(context: &str, data: &[S]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
