//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward function; it never looks at the
//! tape's backward rules, so it is an independent oracle for them.

use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Absolute scale below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|auto − numeric| / max(|auto|, |numeric|, REL_FLOOR)` per input.
    pub max_rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Checks `d f / d inputs` against central differences with step `h`.
///
/// `f` receives the inputs as gradient leaves on a fresh tape and must return
/// a scalar.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    out.backward()?;
    let auto: Vec<Tensor> = vars.iter().map(|v| v.grad().expect("leaf grad")).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport { max_rel_err: Vec::new() };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, g) in auto.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..work[k].numel() {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.max_rel_err.push(worst);
    }
    Ok(report)
}

/// Reduces a tensor-valued output to a scalar with fixed pseudo-random
/// weights, so every output element contributes to the checked gradient.
pub fn weighted_sum(tape: &Tape, out: &Var, seed: u64) -> Result<Var> {
    let shape = out.shape();
    let w = super::rng::randn(&mut super::rng::stream(seed, "gradcheck.weights"), &shape);
    let w = tape.constant(w);
    out.dot(&w)
}
