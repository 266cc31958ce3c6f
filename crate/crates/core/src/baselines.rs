//! Reference localizers: KNN, WKNN, a plain MLP regressor and MetaLoc (the
//! MLP under the meta-learning loops).

use serde::{Deserialize, Serialize};

use autodiff::{Graph, NodeId, Tensor};

use crate::dataset::FingerprintDataset;
use crate::error::{contract, Result};
use crate::meta::{meta_train, MetaConfig, MetaResult};
use crate::model::{fan_in_uniform, frobenius_loss, seeded_rng, train, Model, ParamSet, TrainConfig, TrainResult};
use crate::stats::FeatureStats;

fn check_knn(train_x: &Tensor, train_y: &Tensor, query: &[f64], k: usize) -> Result<()> {
    if train_x.rows() != train_y.rows() || train_y.cols() != 2 {
        return Err(contract("training features and positions disagree"));
    }
    if query.len() != train_x.cols() {
        return Err(contract(format!(
            "query has {} features, training rows have {}",
            query.len(),
            train_x.cols()
        )));
    }
    if k == 0 || k > train_x.rows() {
        return Err(contract(format!("k = {k} with {} labeled rows", train_x.rows())));
    }
    Ok(())
}

/// Indices of the `k` Euclidean-nearest rows; ties go to the smaller index.
pub fn nearest(train_x: &Tensor, query: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..train_x.rows())
        .map(|i| {
            let s: f64 = train_x.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (s, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Mean position of the `k` nearest labeled fingerprints.
pub fn knn_predict(train_x: &Tensor, train_y: &Tensor, query: &[f64], k: usize) -> Result<[f64; 2]> {
    check_knn(train_x, train_y, query, k)?;
    let idx = nearest(train_x, query, k);
    let mut p = [0.0; 2];
    for &i in &idx {
        p[0] += train_y.get(i, 0);
        p[1] += train_y.get(i, 1);
    }
    Ok([p[0] / k as f64, p[1] / k as f64])
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Neighbor indices and their normalized, non-negative cosine weights.
pub fn wknn_weights(train_x: &Tensor, query: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let idx = nearest(train_x, query, k);
    let mut w: Vec<f64> = idx.iter().map(|&i| cosine(query, train_x.row(i)).max(0.0)).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        w.iter_mut().for_each(|v| *v = 1.0 / idx.len() as f64);
    }
    (idx, w)
}

/// Cosine-weighted mean position of the `k` nearest labeled fingerprints.
pub fn wknn_predict(train_x: &Tensor, train_y: &Tensor, query: &[f64], k: usize) -> Result<[f64; 2]> {
    check_knn(train_x, train_y, query, k)?;
    let (idx, w) = wknn_weights(train_x, query, k);
    let mut p = [0.0; 2];
    for (&i, wi) in idx.iter().zip(&w) {
        p[0] += wi * train_y.get(i, 0);
        p[1] += wi * train_y.get(i, 1);
    }
    Ok(p)
}

/// Applies a single-query predictor to every row of `queries`.
pub fn predict_rows(
    queries: &Tensor,
    f: impl Fn(&[f64]) -> Result<[f64; 2]>,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(queries.rows() * 2);
    for i in 0..queries.rows() {
        out.extend_from_slice(&f(queries.row(i))?);
    }
    Ok(Tensor::new(queries.rows(), 2, out)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200; 4],
            output: 2,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

/// Fully connected regressor on z-scored features; the loss only sees
/// labeled rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub norm: FeatureStats,
}

impl MlpModel {
    /// Parameters `mlp{k}.w` (`in x out`) and `mlp{k}.b` (`1 x out`).
    pub fn init(config: MlpConfig, norm: FeatureStats) -> Result<(Self, ParamSet)> {
        if config.output == 0 || norm.dim() == 0 {
            return Err(contract("MLP needs positive input and output widths"));
        }
        let mut rng = seeded_rng(config.seed);
        let mut dims = vec![norm.dim()];
        dims.extend(&config.hidden);
        dims.push(config.output);
        let mut params = ParamSet::new();
        for (k, w) in dims.windows(2).enumerate() {
            params.push(format!("mlp{k}.w"), fan_in_uniform(&mut rng, w[0], w[1]));
            params.push(format!("mlp{k}.b"), fan_in_uniform(&mut rng, w[0], w[1]).select_rows(&[0]));
        }
        Ok((Self { config, norm }, params))
    }

    fn layers(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> autodiff::Result<NodeId> {
        if params.len() % 2 != 0 {
            return Err(autodiff::AdError::Invalid("MLP parameters come in (w, b) pairs".into()));
        }
        let n = params.len() / 2;
        let mut h = x;
        for k in 0..n {
            h = g.matmul(h, params[2 * k])?;
            h = g.add(h, params[2 * k + 1])?;
            if k + 1 < n {
                h = match self.config.activation {
                    Activation::LeakyRelu => g.leaky_relu(h, self.config.leaky_slope)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        Ok(h)
    }

    fn input(&self, g: &mut Graph, x: &Tensor) -> autodiff::Result<NodeId> {
        if x.cols() != self.norm.dim() {
            return Err(autodiff::AdError::ShapeMismatch {
                op: "mlp_forward",
                lhs: x.shape(),
                rhs: [x.rows(), self.norm.dim()],
            });
        }
        Ok(g.constant(self.norm.standardize(x)))
    }
}

impl Model for MlpModel {
    fn forward(&self, g: &mut Graph, params: &[NodeId], x: &Tensor) -> autodiff::Result<NodeId> {
        let xs = self.input(g, x)?;
        self.layers(g, params, xs)
    }

    fn loss(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: &Tensor,
        labeled: &[usize],
        y: &Tensor,
    ) -> autodiff::Result<NodeId> {
        let xl = x.select_rows(labeled);
        let xs = self.input(g, &xl)?;
        let yhat = self.layers(g, params, xs)?;
        let all: Vec<usize> = (0..labeled.len()).collect();
        frobenius_loss(g, yhat, &all, y)
    }
}

/// Trains on the labeled rows of `ds` only; normalization is fitted on them
/// too.
pub fn mlp_train(ds: &FingerprintDataset, config: MlpConfig, cfg: &TrainConfig) -> Result<(MlpModel, TrainResult)> {
    if ds.labeled.is_empty() {
        return Err(contract("MLP training needs labeled rows"));
    }
    let norm = FeatureStats::fit(&ds.x.select_rows(&ds.labeled))?;
    let (model, init) = MlpModel::init(config, norm)?;
    let res = train(&model, init, &ds.x, &ds.labeled, &ds.y, cfg)?;
    Ok((model, res))
}

pub fn mlp_predict(model: &MlpModel, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    crate::model::predict(model, params, x)
}

/// MetaLoc: meta-training with the MLP as the model template. Normalization
/// is pooled over the synthetic datasets.
pub fn metaloc_train(
    datasets: &[FingerprintDataset],
    config: MlpConfig,
    meta: &MetaConfig,
) -> Result<(MlpModel, MetaResult)> {
    let xs: Vec<&Tensor> = datasets.iter().map(|d| &d.x).collect();
    let norm = FeatureStats::fit_pooled(&xs)?;
    let (model, init) = MlpModel::init(config, norm)?;
    let res = meta_train(&model, init, datasets, meta)?;
    Ok((model, res))
}
