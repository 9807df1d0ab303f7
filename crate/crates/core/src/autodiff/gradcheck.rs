//! Central finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-element comparison between reverse-mode and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error of every element, grouped by input.
    pub per_input: Vec<Vec<f64>>,
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurs.
    pub worst: (usize, usize),
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// `|a − b| / max(|a|, |b|, 1e−8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if let Some((index, op)) = tape.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite value produced by {op} (node {index})")));
    }
    if tape.value(out).len() != 1 {
        return Err(Error::contract("grad_check needs a scalar-valued function"));
    }
    Ok((tape, vars, out))
}

fn scalar_at<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences with step `eps`, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    drop(tape);

    let mut probe = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        let mut errors = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let original = probe[i].data()[j];
            probe[i].data_mut()[j] = original + eps;
            let plus = scalar_at(&f, &probe)?;
            probe[i].data_mut()[j] = original - eps;
            let minus = scalar_at(&f, &probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i].data()[j], numeric);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (i, j);
            }
            errors.push(err);
        }
        per_input.push(errors);
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        worst,
        tol,
    })
}
