//! Finite-difference verification of analytic gradients.
//!
//! The check rebuilds the graph from scratch for every probe, so the
//! closure must be a pure function of its inputs.

use super::{Tape, Tensor, TensorError, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default relative-error bound.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares backpropagated gradients against central differences for a
/// scalar-valued function of several tensors.
///
/// `f` receives a fresh tape plus one `Var` per input (each recorded with
/// `requires_grad`) and must return the scalar loss. Every coordinate of
/// every input is probed with step `h`; a coordinate fails when
/// `|analytic - numeric| / (|analytic| + 1e-8)` exceeds `tol`.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
) -> Result<Vec<GradMismatch>, TensorError> {
    let run = |points: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let loss_val = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let per_input = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        Ok((loss_val, per_input))
    };

    let (_, analytic) = run(inputs)?;
    let mut mismatches = Vec::new();
    for (ii, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[coord] += h;
            let (f_plus, _) = run(&plus)?;
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[coord] -= h;
            let (f_minus, _) = run(&minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ii]
                .as_ref()
                .map(|g| g.data()[coord])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            if rel > tol {
                mismatches.push(GradMismatch {
                    input: ii,
                    coord,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(mismatches)
}

/// [`check_gradients`] with the default step and tolerance; panics with a
/// readable report on the first few mismatches.
pub fn assert_gradients(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
) {
    let mismatches = check_gradients(inputs, DEFAULT_STEP, DEFAULT_TOLERANCE, f)
        .expect("gradient check function failed");
    if !mismatches.is_empty() {
        let mut report = String::new();
        for m in mismatches.iter().take(5) {
            report.push_str(&format!(
                "\n  input {} coord {}: analytic {:.9e}, numeric {:.9e} (rel {:.3e})",
                m.input, m.coord, m.analytic, m.numeric, m.rel_error
            ));
        }
        panic!(
            "{} gradient coordinate(s) disagree with central differences:{report}",
            mismatches.len()
        );
    }
}
