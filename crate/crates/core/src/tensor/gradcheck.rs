//! Central finite-difference gradient checking.

use thiserror::Error;

use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor of the relative error, so that gradients which are
/// zero up to rounding do not report huge relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function is not deterministic: {first} then {second} at the same point")]
    NonDeterministic { first: f64, second: f64 },
    #[error("function output must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`,
    /// maximised over every element of every leaf.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (leaf, element) of the worst relative error.
    pub worst: (usize, usize),
    pub tol: f64,
    pub passed: bool,
    pub elements_checked: usize,
}

fn evaluate<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<f64, GradCheckError>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(GradCheckError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar `f` with respect to every leaf
/// against `(f(x + h) - f(x - h)) / 2h`, one element at a time.
///
/// `f` must be deterministic; stochastic pieces have to be frozen by the
/// caller (e.g. injected Gumbel noise, frozen routing).
pub fn finite_diff_check<F>(f: F, leaves: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(GradCheckError::NotScalar(g.shape(out)));
    }
    let first = g.value(out).item();
    let second = evaluate(&f, leaves)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        tol,
        passed: true,
        elements_checked: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.or_zeros(*var);
        for e in 0..leaves[li].len() {
            let x0 = leaves[li].data()[e];
            probe[li].data_mut()[e] = x0 + h;
            let fp = evaluate(&f, &probe)?;
            probe[li].data_mut()[e] = x0 - h;
            let fm = evaluate(&f, &probe)?;
            probe[li].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.elements_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = (li, e);
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
