//! Central finite-difference verification of tape gradients.

use crate::error::{precondition, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Leaf and flat element index of the worst mismatch, set when the check fails.
    pub failing_leaf: Option<usize>,
    pub failing_index: Option<usize>,
    pub passed: bool,
    /// Number of elements compared.
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Compare at most this many evenly spaced elements per leaf.
    pub max_elements_per_leaf: Option<usize>,
}

impl GradCheckOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self {
            eps,
            tol,
            max_elements_per_leaf: None,
        }
    }

    pub fn sampled(mut self, per_leaf: usize) -> Self {
        self.max_elements_per_leaf = Some(per_leaf);
        self
    }
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every element of every leaf.
pub fn finite_diff_check<F>(f: F, leaves: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, leaves, &GradCheckOptions::new(eps, tol))
}

pub fn finite_diff_check_with<F>(f: F, leaves: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(precondition("finite_diff_check", "eps must be positive"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item()?;
    if eval(leaves)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        failing_leaf: None,
        failing_index: None,
        passed: true,
        checked: 0,
    };
    let mut worst = (0, 0);
    let mut probe: Vec<Tensor> = leaves.to_vec();
    for (li, (leaf, var)) in leaves.iter().zip(&vars).enumerate() {
        let zeros;
        let analytic = match tape.grad(*var) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; leaf.numel()];
                &zeros
            }
        };
        for idx in sample_indices(leaf.numel(), opts.max_elements_per_leaf) {
            let orig = leaf.data()[idx];
            probe[li].data_mut()[idx] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe[li].data_mut()[idx] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe[li].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[idx], numeric);
            report.checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
                worst = (li, idx);
            }
        }
    }
    report.passed = report.max_relative_error <= opts.tol;
    if !report.passed {
        report.failing_leaf = Some(worst.0);
        report.failing_index = Some(worst.1);
    }
    Ok(report)
}

fn sample_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => {
            let step = n as f64 / c as f64;
            (0..c).map(|i| ((i as f64 + 0.5) * step) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}
