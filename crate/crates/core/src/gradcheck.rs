//! Central finite-difference checks for [`Graph`] gradients.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every backward rule it checks.

use crate::autodiff::{grad, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, keeps near-zero gradients
/// from amplifying finite-difference round-off.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < rel_tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Compares reverse-mode gradients of scalar `f` with central differences
/// of step `h` for every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = grad(&f, inputs)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, grad_t) in analytic.iter().enumerate() {
        for ei in 0..work[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&f, &work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&f, &work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad_t.data()[ei];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

/// Reduces `out` to a scalar through a fixed random projection
/// `sum(out * weights)`, so every output element carries a distinct weight.
pub fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.leaf(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
