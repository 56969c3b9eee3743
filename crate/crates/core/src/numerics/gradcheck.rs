//! Central finite-difference gradient checks.

use super::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(REL_ERROR_FLOOR)
}

/// Compares analytic and central-difference gradients of the scalar `f`
/// with respect to each input tensor. Returns one relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].values()[i];
            work[k].values_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].values_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].values_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Per-parameter gradient check of a loss built from a whole [`ParamStore`].
/// Returns `(parameter name, relative error, analytic gradient norm)`.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<Vec<(String, f64, f64)>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, false);
        let out = f(&mut tape, &bound)?;
        Ok(tape.item(out))
    };

    let mut work = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let analytic = grads.wrt(bound[id]);
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).values()[i];
            work.get_mut(id).values_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
        report.push((store.name(id).to_owned(), relative_error(&analytic, &numeric), norm));
    }
    Ok(report)
}
