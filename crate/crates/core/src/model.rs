//! Parameter containers, the model interface shared by AGNN and MLP, and the
//! full-batch trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use autodiff::{Adam, Graph, NodeId, Optimizer, Sgd, Tensor};

use crate::error::{contract, Error, Result};

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a parameter leaf, in order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| g.param(n.clone(), t.clone()))
            .collect()
    }

    /// `self + scale * delta`, entrywise.
    pub fn axpy(&self, scale: f64, delta: &[Tensor]) -> Self {
        let tensors = self
            .tensors
            .iter()
            .zip(delta)
            .map(|(p, d)| p.zip_map(d, |a, b| a + scale * b))
            .collect();
        Self {
            names: self.names.clone(),
            tensors,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform fan-in initialization `U(-1/sqrt(rows), 1/sqrt(rows))`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A differentiable position regressor.
pub trait Model: Send + Sync {
    /// Predicted positions (`N x 2`) for every row of `x`.
    fn forward(&self, g: &mut Graph, params: &[NodeId], x: &Tensor) -> autodiff::Result<NodeId>;

    /// `||Y_l - Yhat[labeled]||_F`.
    fn loss(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: &Tensor,
        labeled: &[usize],
        y: &Tensor,
    ) -> autodiff::Result<NodeId> {
        let yhat = self.forward(g, params, x)?;
        frobenius_loss(g, yhat, labeled, y)
    }
}

pub fn frobenius_loss(g: &mut Graph, yhat: NodeId, labeled: &[usize], y: &Tensor) -> autodiff::Result<NodeId> {
    let sel = g.gather_rows(yhat, labeled.to_vec().into())?;
    let target = g.constant(y.clone());
    let diff = g.sub(target, sel)?;
    g.frob_norm(diff)
}

/// Forward pass without gradients.
pub fn predict<M: Model + ?Sized>(model: &M, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = params.register(&mut g);
    let y = model.forward(&mut g, &ids, x)?;
    Ok(g.value(y).clone())
}

/// Loss value and gradients at `params`.
pub fn loss_and_grad<M: Model + ?Sized>(
    model: &M,
    params: &ParamSet,
    x: &Tensor,
    labeled: &[usize],
    y: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let ids = params.register(&mut g);
    let loss = model.loss(&mut g, &ids, x, labeled, y)?;
    let value = g.value(loss).item();
    let grads = g.grad(loss, &ids)?;
    Ok((value, grads.into_iter().map(|n| g.value(n).clone()).collect()))
}

pub fn loss_value<M: Model + ?Sized>(
    model: &M,
    params: &ParamSet,
    x: &Tensor,
    labeled: &[usize],
    y: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids = params.register(&mut g);
    let loss = model.loss(&mut g, &ids, x, labeled, y)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer + Send> {
        match self {
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
            OptimizerKind::Sgd => Box::new(Sgd::new(lr)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 5000,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters with the lowest training loss seen.
    pub params: ParamSet,
    /// Loss before each update.
    pub history: Vec<f64>,
    pub best_epoch: usize,
}

/// Full-batch training on the labeled rows of `x`; every row of `x` takes
/// part in the forward pass.
pub fn train<M: Model + ?Sized>(
    model: &M,
    init: ParamSet,
    x: &Tensor,
    labeled: &[usize],
    y: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    train_observed(model, init, x, labeled, y, cfg, |_, _| {})
}

/// As [`train`], calling `observe(epoch, params)` before each update and once
/// more after the last one (with `epoch == cfg.epochs`).
pub fn train_observed<M: Model + ?Sized>(
    model: &M,
    init: ParamSet,
    x: &Tensor,
    labeled: &[usize],
    y: &Tensor,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &ParamSet),
) -> Result<TrainResult> {
    if labeled.is_empty() {
        return Err(contract("training needs at least one labeled row"));
    }
    let mut params = init;
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0, params.clone());
    let mut last_finite = None;
    for epoch in 0..cfg.epochs {
        observe(epoch, &params);
        let (loss, grads) = match loss_and_grad(model, &params, x, labeled, y) {
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
    observe(cfg.epochs, &params);
    let (_, best_epoch, params) = best;
    Ok(TrainResult {
        params,
        history,
        best_epoch,
    })
}
