//! Central-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{LeafError, Result};
use crate::tensor::Tensor;

/// Gradients below this magnitude are compared by absolute error.
pub const ABS_FALLBACK: f64 = 1e-6;

pub const DEFAULT_EPS: f64 = 1e-3;

/// Relative tolerance the absolute regime is scaled against.
const REL_TOL: f64 = 1e-3;

/// Bound on the rounding error of `f(x±ε)` in units of `f32::EPSILON·max(1,|f|)`.
const ROUNDOFF_ULPS: f64 = 4.0;

/// Magnitude below which a central difference at step `eps` cannot resolve a
/// relative error of `REL_TOL` in `f32`: the quotient's own round-off divided
/// by the tolerance.
pub fn resolution_floor(f_value: f64, eps: f64) -> f64 {
    let roundoff = ROUNDOFF_ULPS * f32::EPSILON as f64 * f_value.abs().max(1.0) / (2.0 * eps);
    (roundoff / REL_TOL).max(ABS_FALLBACK)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()? as f64;
    if !v.is_finite() {
        return Err(LeafError::Numeric(format!("function value {v} is not finite")));
    }
    Ok((v, tape.kink_signature()))
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU or max-pool decision.
    pub skipped_kinks: usize,
    /// Coordinates smaller than this were compared by absolute error.
    pub floor: f64,
}

/// Compares the tape's gradient with a central difference
/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` over every coordinate of every input.
///
/// Per coordinate the error is `|a − n| / max(|a|, |n|, floor)` with `floor`
/// from [`resolution_floor`]. Coordinates where the perturbation changes a
/// ReLU or max-pool branch are skipped and counted.
pub fn finite_diff_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(LeafError::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item()? as f64;
    if !f0.is_finite() {
        return Err(LeafError::Numeric("function value is not finite".into()));
    }
    let floor = resolution_floor(f0, eps);
    let base_sig = tape.kink_signature();
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0, floor };
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            let hi = (x0 as f64 + eps) as f32;
            let lo = (x0 as f64 - eps) as f32;
            probe[ti].data_mut()[j] = hi;
            let (f_hi, sig_hi) = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[j] = lo;
            let (f_lo, sig_lo) = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[j] = x0;

            let a = analytic[ti][j] as f64;
            if !a.is_finite() {
                return Err(LeafError::Numeric(format!("analytic gradient {a} is not finite")));
            }
            if sig_hi != base_sig || sig_lo != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Largest per-coordinate relative error over all inputs.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_report(f, inputs, eps).map(|r| r.max_rel_error)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_agrees() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_vec(&[4], vec![-1.5, -0.2, 0.3, 1.7]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let r = tape.relu(v);
                Ok(tape.sum(r))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let err = finite_diff_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &x, DEFAULT_EPS)
            .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let r = finite_diff_check(
            |tape, v| {
                let big = tape.scale(v, f32::INFINITY);
                Ok(tape.sum(big))
            },
            &x,
            DEFAULT_EPS,
        );
        assert!(matches!(r, Err(LeafError::Numeric(_))));
    }
}
