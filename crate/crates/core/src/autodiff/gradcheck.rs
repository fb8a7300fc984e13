//! Central finite-difference gradient checking.
//!
//! The numeric gradient only ever calls the forward pass, so it stays
//! independent of the backward implementation it is used to verify.

use crate::error::{Result, SlapError};

use super::{Precision, Tape, Tensor};

/// A differentiable scalar function of several tensors, expressed as a graph
/// builder. The builder must be pure: same inputs, same loss.
pub trait ScalarFn {
    fn eval(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Tensor>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    fn eval(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Tensor> {
        self(tape, inputs)
    }
}

/// Forward value with all inputs as constants.
fn forward_value(f: &dyn ScalarFn, inputs: &[(Vec<f64>, Vec<usize>)]) -> Result<f64> {
    let mut tape = Tape::new();
    let consts: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| Tensor::from_vec(d.clone(), s))
        .collect::<Result<_>>()?;
    f.eval(&mut tape, &consts)?.item()
}

/// Central-difference gradients for every element of every input.
pub fn numeric_gradients(
    f: &dyn ScalarFn,
    inputs: &[(Vec<f64>, Vec<usize>)],
) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = vec![0.0; inputs[ti].0.len()];
        for ei in 0..inputs[ti].0.len() {
            let x = inputs[ti].0[ei];
            let h = 1e-6 * x.abs().max(1.0);
            let mut bumped: Vec<(Vec<f64>, Vec<usize>)> = inputs.to_vec();
            bumped[ti].0[ei] = x + h;
            let fp = forward_value(f, &bumped)?;
            bumped[ti].0[ei] = x - h;
            let fm = forward_value(f, &bumped)?;
            g[ei] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Analytic gradients via the tape.
pub fn analytic_gradients(
    f: &dyn ScalarFn,
    inputs: &[(Vec<f64>, Vec<usize>)],
    precision: Precision,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::with_precision(precision);
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s))
        .collect::<Result<_>>()?;
    let loss = f.eval(&mut tape, &leaves)?;
    let grads = tape.backward(&loss)?;
    Ok(leaves
        .iter()
        .map(|t| {
            grads
                .of(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

/// Scale-normalized disagreement between analytic and numeric gradients:
/// `max_i |a_i - n_i| / (max_i |n_i| + 1e-12)`, maximized over inputs.
pub fn max_relative_error(
    f: &dyn ScalarFn,
    inputs: &[(Vec<f64>, Vec<usize>)],
) -> Result<f64> {
    let analytic = analytic_gradients(f, inputs, Precision::F64)?;
    let numeric = numeric_gradients(f, inputs)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let scale = n.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-12;
        for (ai, ni) in a.iter().zip(n) {
            worst = worst.max((ai - ni).abs() / scale);
        }
    }
    Ok(worst)
}

/// Assert-style helper used by unit and acceptance tests.
pub fn check(
    f: &dyn ScalarFn,
    inputs: &[(Vec<f64>, Vec<usize>)],
    tol: f64,
    what: &str,
) -> Result<()> {
    let err = max_relative_error(f, inputs)?;
    if err < tol {
        Ok(())
    } else {
        Err(SlapError::Internal(format!(
            "gradient check failed for {what}: max relative error {err:.3e} >= {tol:.1e}"
        )))
    }
}
