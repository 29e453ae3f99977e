//! Central finite-difference oracle for gradient validation.
//!
//! The checker only evaluates forward passes on perturbed inputs; it never
//! touches the tape's adjoint rules, so it stays an independent reference
//! for them. Run it at `f64`: at `f32` the difference quotient drowns in
//! rounding noise.

use crate::error::Result;
use crate::tensor::{Tape, TapeId, Tensor};

/// Step and tolerances for a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Allowed relative error between analytic and numeric gradients.
    pub rel_tol: f64,
    /// Entries where both gradients are below this are accepted outright.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

/// Compares tape gradients of a scalar loss against central finite
/// differences, entry by entry, for every input marked `requires_grad`.
///
/// `build` receives a fresh tape plus leaf ids for `inputs` (in order) and
/// returns the loss node. It is re-invoked for every perturbed evaluation.
pub fn check_gradients<F>(
    config: &GradCheckConfig,
    inputs: &[Tensor<f64>],
    build: F,
) -> std::result::Result<(), String>
where
    F: Fn(&mut Tape<f64>, &[TapeId]) -> Result<TapeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let ids: Vec<TapeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids).map_err(|e| format!("forward failed: {e}"))?;
        Ok(tape.value(loss).item())
    };

    // analytic gradients from one recorded pass
    let mut tape = Tape::new();
    let ids: Vec<TapeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids).map_err(|e| format!("forward failed: {e}"))?;
    tape.backward(loss).map_err(|e| format!("backward failed: {e}"))?;

    let mut failures = Vec::new();
    for (input_idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = tape
            .grad(ids[input_idx])
            .ok_or_else(|| format!("input {input_idx}: no gradient recorded"))?
            .clone();
        for entry in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[input_idx].data_mut()[entry] += config.step;
            let mut minus = inputs.to_vec();
            minus[input_idx].data_mut()[entry] -= config.step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * config.step);
            let a = analytic.data()[entry];

            let denom = a.abs().max(numeric.abs());
            let ok = (a - numeric).abs() <= config.abs_tol
                || (a - numeric).abs() <= config.rel_tol * denom;
            if !ok && failures.len() < 8 {
                failures.push(format!(
                    "input {input_idx} entry {entry}: analytic {a:.9e} vs numeric {numeric:.9e}"
                ));
            }
        }
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(format!(
            "gradient check failed ({} shown):\n{}",
            failures.len(),
            failures.join("\n")
        ))
    }
}
