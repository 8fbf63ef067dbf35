//! Central-difference verification of tape gradients.
//!
//! Used by the op and model tests: build a scalar loss twice per input
//! element (at ±ε) and compare the finite-difference slope against the
//! gradient reported by [`Tape::backward`]. Only inputs flagged
//! `requires_grad` are checked.

use super::{Tape, Tensor, Var};

/// Builds the loss with `build`, runs backward, and compares every
/// gradient element of every `requires_grad` input against a central
/// finite difference. `build` must be deterministic.
///
/// The comparison is `|analytic − numeric| ≤ tol · (1 + max(|analytic|,
/// |numeric|))`, i.e. absolute near zero and relative for large values.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(
            tape.value(loss).len(),
            1,
            "gradcheck requires a scalar loss"
        );
        tape.value(loss)[0]
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss)
        .map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        for j in 0..input.data.len() {
            let orig = work[idx].data[j];
            work[idx].data[j] = orig + eps;
            let plus = eval(&work);
            work[idx].data[j] = orig - eps;
            let minus = eval(&work);
            work[idx].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx][j];
            let scale = 1.0 + a.abs().max(numeric.abs());
            if (a - numeric).abs() > tol * scale {
                return Err(format!(
                    "input {idx} element {j}: analytic {a:.9e} vs numeric {numeric:.9e} \
                     (diff {:.3e}, allowed {:.3e})",
                    (a - numeric).abs(),
                    tol * scale
                ));
            }
        }
    }
    Ok(())
}

/// Convenience wrapper with the defaults used throughout the test suite.
pub fn check_default<F>(build: F, inputs: &[Tensor]) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check_gradients(build, inputs, 1e-5, 1e-6)
}
