use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max_j |analytic_j − central_j| / max(|analytic_j|, |central_j|, 1e-12)`
    /// over the coordinates that were not excluded.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose ±h probes switch a relu/clip/max branch.
    pub excluded: Vec<usize>,
}

/// Compares the reverse-mode gradient of a scalar program against the
/// five-point central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` in double precision.
///
/// `f` receives a fresh graph and the leaf holding `x` and returns the scalar
/// output node. A coordinate is excluded when any probe `x ± h·e_j` or
/// `x ± 2h·e_j` lands on a different branch of a non-smooth op than `x`
/// itself, which covers relu kinks within `2h` of a coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let leaf = graph.param(x.clone());
    let out = f(&mut graph, leaf)?;
    let fx = graph.value(out).item()?;
    if !fx.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {fx}")));
    }
    let signature = graph.branch_signature();
    let analytic = graph.backward(out)?.wrt(leaf)?.clone();

    let probe = |j: usize, delta: f64| -> Result<(f64, u64)> {
        let mut shifted = x.clone();
        shifted.data_mut()[j] += delta;
        let mut g = Graph::new();
        let leaf = g.constant(shifted);
        let out = f(&mut g, leaf)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!(
                "f is {v} at coordinate {j} shifted by {delta}"
            )));
        }
        Ok((v, g.branch_signature()))
    };

    let mut max_rel_error: f64 = 0.0;
    let mut excluded = Vec::new();
    let mut checked = 0;
    for j in 0..x.len() {
        let mut f = [0.0; 4];
        let mut same_branch = true;
        for (slot, delta) in f.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
            let (v, sig) = probe(j, delta)?;
            *slot = v;
            same_branch &= sig == signature;
        }
        if !same_branch {
            excluded.push(j);
            continue;
        }
        let central = (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h);
        let a = analytic.data()[j];
        let denom = a.abs().max(central.abs()).max(1e-12);
        max_rel_error = max_rel_error.max((a - central).abs() / denom);
        checked += 1;
    }
    Ok(GradCheck {
        max_rel_error,
        checked,
        excluded,
    })
}
