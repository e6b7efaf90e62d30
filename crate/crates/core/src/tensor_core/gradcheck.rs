//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor_core::tape::{Tape, Var};
use crate::tensor_core::tensor::Tensor;

/// Default perturbation for [`finite_diff_check`].
pub const DEFAULT_EPS: f64 = 1e-5;

/// One-sided slopes further apart than this (relative) mark a kink.
const KINK_TOLERANCE: f64 = 1e-3;

/// Floor in the relative error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Coordinates excluded because `f` is not differentiable there.
    pub kinks: Vec<(usize, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of `f` at `x` against central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`finite_diff_check`]; every tensor in `xs` is
/// perturbed coordinate by coordinate.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], at: Option<(usize, usize)>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            let loc = at
                .map(|(t, i)| format!("input {t}, coordinate {i}"))
                .unwrap_or_else(|| "the unperturbed point".into());
            return Err(Error::Numeric(format!("f = {v} at {loc}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let f0 = eval(xs, None)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::Contract("missing gradient for input".into()))?
            .clone();
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let fp = eval(&work, Some((t, i)))?;
            work[t].data_mut()[i] = orig - eps;
            let fm = eval(&work, Some((t, i)))?;
            work[t].data_mut()[i] = orig;

            let fwd = (fp - f0) / eps;
            let bwd = (f0 - fm) / eps;
            if (fwd - bwd).abs() > KINK_TOLERANCE * fwd.abs().max(bwd.abs()).max(1.0) {
                report.kinks.push((t, i));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}
