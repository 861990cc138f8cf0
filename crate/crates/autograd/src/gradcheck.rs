//! Reverse-mode versus central finite differences.

use crate::error::Result;
use crate::graph::{Array, Graph, Var};

/// Denominator floor for relative errors, so vanishing gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`
    /// over entries not flagged as non-smooth.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat element)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Entries whose one-sided differences disagree, i.e. a kink lies
    /// within the step.
    pub nonsmooth: Vec<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval<F>(f: &F, points: &[Array]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.item(out))
}

/// Checks every scalar of every input of the scalar function `f`.
pub fn grad_check<F>(f: F, points: &[Array], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.item(out);
    let grads = g.backward(out)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<Array> = points.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let n = points[i].len();
        for e in 0..n {
            let orig = points[i].as_slice_memory_order().unwrap()[e];
            work[i].as_slice_memory_order_mut().unwrap()[e] = orig + h;
            let fp = eval(&f, &work)?;
            work[i].as_slice_memory_order_mut().unwrap()[e] = orig - h;
            let fm = eval(&f, &work)?;
            work[i].as_slice_memory_order_mut().unwrap()[e] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            report.checked += 1;
            if (fwd - bwd).abs() > 1e-2 * numeric.abs().max(1.0) {
                report.nonsmooth.push((i, e));
                continue;
            }
            let av = a.as_slice_memory_order().unwrap()[e];
            let abs = (av - numeric).abs();
            let rel = abs / av.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}
