//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is used to verify.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Step used by the checks throughout the test suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]. Gradients that are identically
/// zero (e.g. attention key biases, which softmax cancels) would otherwise be
/// compared noise-to-noise.
pub const NORM_FLOOR: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖, NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Numeric gradient of the scalar `f` with respect to `inputs[which]`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], which: usize, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut work = inputs.to_vec();
    let n = inputs[which].numel();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work[which].data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work[which].data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Compares tape gradients of `f` against central differences for every
/// input; returns the relative error per input.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("leaf gradient").data().to_vec();
        let numeric = numeric_gradient(&f, inputs, i, step)?;
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Checks a loss built from a [`ParamStore`]; returns the relative error
/// for every named parameter.
pub fn check_store<F>(store: &ParamStore, f: F, step: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let errors = check(
        |tape, vars| f(tape, &Bound::from_vars(vars.to_vec())),
        &inputs,
        step,
    )?;
    Ok(store
        .iter()
        .map(|(n, _)| n.to_string())
        .zip(errors)
        .collect())
}
