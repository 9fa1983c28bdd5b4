//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences: for every coordinate of every input,
//! `(f(x+h) - f(x-h)) / 2h` is compared against the analytic gradient with
//! relative error `|analytic - numeric| / max(1, |numeric|)`. The function
//! under test must be deterministic — anything stochastic has to fix its
//! draws (seeded streams) so repeated evaluations agree bitwise; this is
//! probed explicitly before any derivative is trusted.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate, analytic, numeric)` for the worst pair.
    pub worst: (usize, usize, f64, f64),
    pub coords_checked: usize,
}

/// Check `f`'s analytic gradients with respect to each tensor in `inputs`.
///
/// `inputs` must all be `requires_grad` leaves; `f` is re-evaluated with
/// perturbed detached copies for the numeric side, so it must read its
/// differentiable state exclusively through the tensors it is handed.
pub fn grad_check<F: Scalar>(
    f: &mut dyn FnMut(&[Tensor<F>]) -> Result<Tensor<F>>,
    inputs: &[Tensor<F>],
    step: f64,
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(Error::Config("grad_check: no inputs".into()));
    }
    if let Some(i) = inputs.iter().position(|t| !t.requires_grad()) {
        return Err(Error::Config(format!(
            "grad_check: input {i} is not a requires_grad leaf"
        )));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("grad_check: bad step {step}")));
    }

    // Determinism probe: two evaluations must agree bitwise, otherwise the
    // finite-difference quotients below are meaningless.
    let y1 = f(inputs)?.item()?.as_f64();
    let y2 = f(inputs)?.item()?.as_f64();
    if y1.to_bits() != y2.to_bits() {
        return Err(Error::Config(format!(
            "grad_check: function is not deterministic ({y1} vs {y2})"
        )));
    }

    for t in inputs {
        t.zero_grad();
    }
    let y = f(inputs)?;
    y.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        coords_checked: 0,
    };

    let mut eval_at = |xs: &[Tensor<F>]| -> Result<f64> { Ok(f(xs)?.item()?.as_f64()) };

    for (i, input) in inputs.iter().enumerate() {
        let base: Vec<F> = input.data().to_vec();
        for j in 0..base.len() {
            let mut perturbed: Vec<Tensor<F>> = inputs.to_vec();

            let mut plus = base.clone();
            plus[j] = plus[j] + F::of(step);
            perturbed[i] = Tensor::from_vec(plus, input.shape())?;
            let fp = eval_at(&perturbed)?;

            let mut minus = base.clone();
            minus[j] = minus[j] - F::of(step);
            perturbed[i] = Tensor::from_vec(minus, input.shape())?;
            let fm = eval_at(&perturbed)?;

            let numeric = (fp - fm) / (2.0 * step);
            let rel = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j, analytic[i][j], numeric);
            }
        }
    }
    Ok(report)
}
