//! Central-difference gradient checking.

use crate::error::{AdError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Agreement between analytic and numeric gradients, per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest entrywise relative error.
    pub per_param: Vec<(String, f64)>,
    /// `||g - g_fd|| / max(||g||, ||g_fd||)` over the whole tensor.
    pub per_param_norm: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    /// Tensor-level relative error; unlike [`Self::max_rel_err`] it is not
    /// dominated by entries whose gradient sits at the finite-difference
    /// noise floor.
    pub fn max_norm_rel_err(&self) -> f64 {
        self.per_param_norm.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, point: &[(String, Tensor)]) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = point
        .iter()
        .map(|(name, t)| g.param(name.clone(), t.clone()))
        .collect();
    let root = f(&mut g, &ids)?;
    let shape = g.value(root).shape();
    if shape != [1, 1] {
        return Err(AdError::NonScalarRoot { shape });
    }
    Ok((g, ids, root))
}

fn scalar_at<F>(f: &F, point: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (g, _, root) = evaluate(f, point)?;
    Ok(g.value(root).item())
}

/// Compares the backward gradient of `f` at `point` against central
/// differences with the given `step`, entry by entry.
///
/// `f` receives a fresh graph and the parameter node ids (in `point` order)
/// and returns a scalar node. Relative error uses
/// `|g - g_fd| / max(|g|, |g_fd|, 1e-12)`.
pub fn grad_check<F>(f: F, point: &[(String, Tensor)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(AdError::Invalid(format!("step must be positive, got {step}")));
    }
    let (mut g, ids, root) = evaluate(&f, point)?;
    let grads = g.grad(root, &ids)?;
    let analytic: Vec<Tensor> = grads.iter().map(|&n| g.value(n).clone()).collect();

    let mut work: Vec<(String, Tensor)> = point.to_vec();
    let mut per_param = Vec::with_capacity(point.len());
    let mut per_param_norm = Vec::with_capacity(point.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        let (mut diff2, mut exact2, mut numeric2) = (0.0, 0.0, 0.0);
        for k in 0..grad.len() {
            let orig = work[p].1.data()[k];
            work[p].1.data_mut()[k] = orig + step;
            let plus = scalar_at(&f, &work)?;
            work[p].1.data_mut()[k] = orig - step;
            let minus = scalar_at(&f, &work)?;
            work[p].1.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let exact = grad.data()[k];
            let denom = exact.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((exact - numeric).abs() / denom);
            diff2 += (exact - numeric) * (exact - numeric);
            exact2 += exact * exact;
            numeric2 += numeric * numeric;
        }
        per_param.push((point[p].0.clone(), worst));
        let norm = f64::max(exact2, numeric2).sqrt().max(1e-12);
        per_param_norm.push((point[p].0.clone(), diff2.sqrt() / norm));
    }
    Ok(GradCheckReport { per_param, per_param_norm })
}
