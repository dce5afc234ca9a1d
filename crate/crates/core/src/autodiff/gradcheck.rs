//! Central finite-difference checks against the tape's analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::TensorError;

/// Magnitude below which gradient differences are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares `backward` of `f` against `(f(x+h) − f(x−h)) / 2h` for every
/// element of every input. `f` must return a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    assert!(h > 0.0 && h <= 1e-2, "finite-difference step must lie in (0, 1e-2]");
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let x0 = input.data()[idx];
            probe[which].data_mut()[idx] = x0 + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[idx] = x0 - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[which].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (which, idx);
            }
        }
    }
    Ok(report)
}
