//! Model-agnostic meta-learning over synthetic fingerprint datasets, and
//! few-shot adaptation to a target environment.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use autodiff::{Graph, Tensor};

use crate::dataset::FingerprintDataset;
use crate::error::{contract, Error, Result};
use crate::model::{loss_and_grad, loss_value, predict, seeded_rng, Model, OptimizerKind, ParamSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Query gradient at the adapted parameters, applied to the originals.
    #[default]
    FirstOrder,
    /// Exact gradient through the inner step.
    SecondOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner step size.
    pub alpha: f64,
    /// Outer step size.
    pub beta: f64,
    /// Adaptation step size; `None` follows `alpha`.
    pub zeta: Option<f64>,
    /// Tasks drawn from each dataset per meta-epoch.
    pub tasks_per_dataset: usize,
    /// Fraction of a task's labels used as support.
    pub support_fraction: f64,
    pub meta_epochs: usize,
    pub adaptation_steps: usize,
    pub mode: MetaGradMode,
    pub outer: OptimizerKind,
    /// Fingerprints per task.
    pub n0: usize,
    /// Labeled fingerprints per task.
    pub n_l: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-3,
            zeta: None,
            tasks_per_dataset: 1,
            support_fraction: 0.5,
            meta_epochs: 10_000,
            adaptation_steps: 100,
            mode: MetaGradMode::FirstOrder,
            outer: OptimizerKind::Adam,
            n0: 200,
            n_l: 20,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn zeta(&self) -> f64 {
        self.zeta.unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        let zeta = self.zeta();
        if !(self.alpha > 0.0 && self.beta >= 0.0 && zeta > 0.0) {
            return Err(contract(format!(
                "step sizes must be positive (alpha {}, beta {}, zeta {zeta})",
                self.alpha, self.beta
            )));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(contract("support fraction must lie in (0, 1)"));
        }
        if self.tasks_per_dataset == 0 {
            return Err(contract("at least one task per dataset"));
        }
        if self.n_l == 0 || self.n_l > self.n0 {
            return Err(contract(format!("need 0 < n_l <= n0, got n_l {} n0 {}", self.n_l, self.n0)));
        }
        Ok(())
    }
}

/// A support/query episode drawn from one dataset. Indices refer to rows of
/// `x`; rows in neither set are unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub x: Tensor,
    pub support: Vec<usize>,
    pub support_y: Tensor,
    pub query: Vec<usize>,
    pub query_y: Tensor,
    pub source: usize,
}

impl Task {
    pub fn labeled(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.support.iter().chain(&self.query).copied().collect();
        l.sort_unstable();
        l
    }
}

fn label_rows(ds: &FingerprintDataset, rows: &[usize]) -> Result<Tensor> {
    let mut y = Vec::with_capacity(rows.len() * 2);
    for &r in rows {
        let p = ds
            .position(r)
            .ok_or_else(|| contract(format!("row {r} of dataset is unlabeled")))?;
        y.extend_from_slice(&p);
    }
    Ok(Tensor::new(rows.len(), 2, y)?)
}

/// Draws `n0` distinct fingerprints, labels `n_l` of them and splits those
/// into `ceil(p * n_l)` support and the rest query.
pub fn sample_task(
    ds: &FingerprintDataset,
    source: usize,
    n0: usize,
    n_l: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Task> {
    if !ds.is_fully_labeled() {
        return Err(contract("task sampling needs a fully labeled dataset"));
    }
    if n0 > ds.len() || n_l > n0 || n_l == 0 {
        return Err(contract(format!(
            "cannot draw n0 = {n0}, n_l = {n_l} from {} fingerprints",
            ds.len()
        )));
    }
    let rows = sample(rng, ds.len(), n0).into_vec();
    let labeled = sample(rng, n0, n_l).into_vec();
    let n_s = ((p * n_l as f64).ceil() as usize).clamp(1, n_l);
    let support: Vec<usize> = labeled[..n_s].to_vec();
    let query: Vec<usize> = labeled[n_s..].to_vec();
    let pick = |local: &[usize]| -> Vec<usize> { local.iter().map(|&i| rows[i]).collect() };
    Ok(Task {
        x: ds.x.select_rows(&rows),
        support_y: label_rows(ds, &pick(&support))?,
        query_y: label_rows(ds, &pick(&query))?,
        support,
        query,
        source,
    })
}

/// One plain gradient step on the support loss.
pub fn inner_step<M: Model + ?Sized>(model: &M, params: &ParamSet, task: &Task, alpha: f64) -> Result<ParamSet> {
    if task.support.is_empty() {
        return Err(contract("task has no support labels"));
    }
    let (_, g) = loss_and_grad(model, params, &task.x, &task.support, &task.support_y)?;
    Ok(params.axpy(-alpha, &g))
}

/// Query loss after one inner step, summed over `tasks`. Tasks with an empty
/// query set contribute their support loss instead.
pub fn meta_objective<M: Model + ?Sized>(model: &M, params: &ParamSet, tasks: &[Task], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in tasks {
        let adapted = inner_step(model, params, t, alpha)?;
        let (idx, y) = query_or_support(t);
        total += loss_value(model, &adapted, &t.x, idx, y)?;
    }
    Ok(total)
}

fn query_or_support(t: &Task) -> (&[usize], &Tensor) {
    if t.query.is_empty() {
        (&t.support, &t.support_y)
    } else {
        (&t.query, &t.query_y)
    }
}

/// Meta-objective and its gradient for a single task.
pub fn task_meta_gradient<M: Model + ?Sized>(
    model: &M,
    params: &ParamSet,
    task: &Task,
    alpha: f64,
    mode: MetaGradMode,
) -> Result<(f64, Vec<Tensor>)> {
    if task.support.is_empty() {
        return Err(contract("task has no support labels"));
    }
    let (q_idx, q_y) = query_or_support(task);
    match mode {
        MetaGradMode::FirstOrder => {
            let adapted = inner_step(model, params, task, alpha)?;
            loss_and_grad(model, &adapted, &task.x, q_idx, q_y)
        }
        MetaGradMode::SecondOrder => {
            let mut g = Graph::new();
            let ids = params.register(&mut g);
            let ls = model.loss(&mut g, &ids, &task.x, &task.support, &task.support_y)?;
            let grads = g.grad(ls, &ids)?;
            let mut adapted = Vec::with_capacity(ids.len());
            for (&p, &dp) in ids.iter().zip(&grads) {
                let step = g.scale(dp, alpha)?;
                adapted.push(g.sub(p, step)?);
            }
            let lq = model.loss(&mut g, &adapted, &task.x, q_idx, q_y)?;
            let value = g.value(lq).item();
            let meta = g.grad(lq, &ids)?;
            Ok((value, meta.into_iter().map(|n| g.value(n).clone()).collect()))
        }
    }
}

/// Summed meta-objective and gradient over `tasks`. Tasks are evaluated in
/// parallel and accumulated in order.
pub fn meta_gradient<M: Model + ?Sized>(
    model: &M,
    params: &ParamSet,
    tasks: &[Task],
    alpha: f64,
    mode: MetaGradMode,
) -> Result<(f64, Vec<Tensor>)> {
    let parts: Vec<Result<(f64, Vec<Tensor>)>> = tasks
        .par_iter()
        .map(|t| task_meta_gradient(model, params, t, alpha, mode))
        .collect();
    let mut total = 0.0;
    let mut grad: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc = acc.zip_map(gi, |a, b| a + b);
        }
    }
    Ok((total, grad))
}

#[derive(Debug, Clone)]
pub struct MetaResult {
    /// Parameters with the lowest meta-loss seen.
    pub params: ParamSet,
    /// Meta-loss per epoch, before the update.
    pub history: Vec<f64>,
    pub best_epoch: usize,
}

/// Draws one meta-epoch of tasks, `r` per dataset in dataset order.
pub fn sample_epoch(datasets: &[FingerprintDataset], cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Task>> {
    let mut tasks = Vec::with_capacity(datasets.len() * cfg.tasks_per_dataset);
    for (i, ds) in datasets.iter().enumerate() {
        for _ in 0..cfg.tasks_per_dataset {
            tasks.push(sample_task(ds, i, cfg.n0, cfg.n_l, cfg.support_fraction, rng)?);
        }
    }
    Ok(tasks)
}

/// Meta-trains `init` on tasks drawn from the synthetic `datasets`.
pub fn meta_train<M: Model + ?Sized>(
    model: &M,
    init: ParamSet,
    datasets: &[FingerprintDataset],
    cfg: &MetaConfig,
) -> Result<MetaResult> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(contract("meta-training needs at least one dataset"));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut params = init;
    let mut opt = cfg.outer.build(cfg.beta);
    let mut history = Vec::with_capacity(cfg.meta_epochs);
    let mut best = (f64::INFINITY, 0, params.clone());
    let mut last_finite = None;
    for epoch in 0..cfg.meta_epochs {
        let tasks = sample_epoch(datasets, cfg, &mut rng)?;
        let (loss, grads) = match meta_gradient(model, &params, &tasks, cfg.alpha, cfg.mode) {
            Ok(v) => v,
            Err(Error::Autodiff(autodiff::AdError::NonFinite { .. })) => {
                return Err(Error::Diverged { epoch, last_finite });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch, last_finite });
        }
        last_finite = Some(epoch);
        history.push(loss);
        if loss < best.0 {
            best = (loss, epoch, params.clone());
        }
        opt.step(&mut params.tensors, &grads);
    }
    let (_, best_epoch, params) = best;
    Ok(MetaResult {
        params,
        history,
        best_epoch,
    })
}

/// Labeled fingerprints of the target environment split into support and
/// query.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSplit {
    pub support: Vec<usize>,
    pub support_y: Tensor,
    pub query: Vec<usize>,
    pub query_y: Tensor,
}

/// Splits the labels of `ds` with the same `ceil(p * n_l)` rule as tasks.
pub fn split_labels(ds: &FingerprintDataset, p: f64, rng: &mut impl Rng) -> Result<AdaptSplit> {
    let n_l = ds.labeled.len();
    if n_l == 0 {
        return Err(contract("target dataset has no labels"));
    }
    let order = sample(rng, n_l, n_l).into_vec();
    let n_s = ((p * n_l as f64).ceil() as usize).clamp(1, n_l);
    let mut support: Vec<usize> = order[..n_s].iter().map(|&k| ds.labeled[k]).collect();
    let mut query: Vec<usize> = order[n_s..].iter().map(|&k| ds.labeled[k]).collect();
    support.sort_unstable();
    query.sort_unstable();
    Ok(AdaptSplit {
        support_y: label_rows(ds, &support)?,
        query_y: label_rows(ds, &query)?,
        support,
        query,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    /// Parameters with the lowest query loss seen.
    pub params: ParamSet,
    /// Query loss before any step (index 0) and after each step.
    pub query_history: Vec<f64>,
    pub best_step: usize,
}

/// Fine-tunes on the support labels with plain gradient steps of size
/// `zeta`, keeping the parameters with the lowest query loss. With an empty
/// query set the support loss is tracked instead.
pub fn adapt<M: Model + ?Sized>(
    model: &M,
    theta: &ParamSet,
    x: &Tensor,
    split: &AdaptSplit,
    zeta: f64,
    steps: usize,
) -> Result<AdaptResult> {
    adapt_observed(model, theta, x, split, zeta, steps, |_, _| {})
}

/// As [`adapt`], calling `observe(step, params)` for step 0 and after every
/// update.
pub fn adapt_observed<M: Model + ?Sized>(
    model: &M,
    theta: &ParamSet,
    x: &Tensor,
    split: &AdaptSplit,
    zeta: f64,
    steps: usize,
    mut observe: impl FnMut(usize, &ParamSet),
) -> Result<AdaptResult> {
    if split.support.is_empty() {
        return Err(contract("adaptation needs support labels"));
    }
    let (q_idx, q_y) = if split.query.is_empty() {
        (&split.support, &split.support_y)
    } else {
        (&split.query, &split.query_y)
    };
    let mut params = theta.clone();
    let mut history = Vec::with_capacity(steps + 1);
    let mut best = (f64::INFINITY, 0, params.clone());
    for step in 0..=steps {
        observe(step, &params);
        let q = loss_value(model, &params, x, q_idx, q_y)?;
        if !q.is_finite() {
            return Err(Error::Diverged {
                epoch: step,
                last_finite: step.checked_sub(1),
            });
        }
        history.push(q);
        if q < best.0 {
            best = (q, step, params.clone());
        }
        if step < steps {
            let (_, g) = loss_and_grad(model, &params, x, &split.support, &split.support_y)?;
            params = params.axpy(-zeta, &g);
        }
    }
    let (_, best_step, params) = best;
    Ok(AdaptResult {
        params,
        query_history: history,
        best_step,
    })
}

/// Predicts the rows of `xt` in a joint forward pass over `[x0; xt]`.
pub fn localize<M: Model + ?Sized>(model: &M, params: &ParamSet, x0: &Tensor, xt: &Tensor) -> Result<Tensor> {
    if x0.cols() != xt.cols() {
        return Err(contract(format!(
            "fingerprints have {} features, test points {}",
            x0.cols(),
            xt.cols()
        )));
    }
    if xt.rows() == 0 {
        return Ok(Tensor::zeros(0, 2));
    }
    let joint = x0.vstack(xt)?;
    let y = predict(model, params, &joint)?;
    let rows: Vec<usize> = (x0.rows()..joint.rows()).collect();
    Ok(y.select_rows(&rows))
}
