//! Adaptive graph neural network: learned latent distances (DLM), a
//! thresholded soft adjacency (ALM) and graph attention layers (GAL).
//!
//! Every stage records onto an [`autodiff::Graph`], so the whole pipeline
//! (including the adjacency thresholds) is differentiable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use autodiff::{Graph, NodeId, SparseMap, Tensor};

use crate::dataset::FingerprintDataset;
use crate::error::{contract, Result};
use crate::model::{fan_in_uniform, seeded_rng, Model, ParamSet, TrainConfig, TrainResult};
use crate::stats::{percentile, FeatureStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgnnConfig {
    pub d_m1: usize,
    pub d_m2: usize,
    pub f_a: usize,
    pub f_att: usize,
    /// Widths of the hidden attention layers.
    pub hidden: Vec<usize>,
    pub output: usize,
    pub leaky_slope: f64,
    /// Coarse neighbor threshold; `None` picks `t_h0_percentile` of the
    /// initial off-diagonal latent distances.
    pub t_h0: Option<f64>,
    pub t_h0_percentile: f64,
    /// Smooth-step sharpness; `None` uses `10 / median(initial distances)`.
    pub gamma: Option<f64>,
    /// De-normalize outputs with the label moments (see [`TargetScale`]).
    /// Off by default: the raw network output is in meters.
    pub scale_output: bool,
    pub seed: u64,
}

impl Default for AgnnConfig {
    fn default() -> Self {
        Self {
            d_m1: 20,
            d_m2: 20,
            f_a: 50,
            f_att: 50,
            hidden: vec![100],
            output: 2,
            leaky_slope: 0.01,
            t_h0: None,
            t_h0_percentile: 30.0,
            gamma: None,
            scale_output: false,
            seed: 0,
        }
    }
}

/// Hyperparameters frozen at initialization plus the input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgnnModel {
    pub config: AgnnConfig,
    pub norm: FeatureStats,
    pub t_h0: f64,
    pub gamma: f64,
    pub target: TargetScale,
}

/// Fixed affine map from raw network output to meters, `y = raw * std + mean`
/// per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetScale {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Moments of the labels; coordinates without spread keep unit scale.
    pub fn fit(y: &Tensor) -> Result<Self> {
        if y.rows() == 0 {
            return Ok(Self::identity(y.cols()));
        }
        let s = FeatureStats::fit(y)?;
        let std = s.std.iter().map(|&v| if v > 0.0 { v } else { 1.0 }).collect();
        Ok(Self { mean: s.mean, std })
    }

    pub fn apply(&self, g: &mut Graph, raw: NodeId) -> autodiff::Result<NodeId> {
        let dim = self.mean.len();
        let scale = g.constant(Tensor::from_fn(dim, dim, |i, j| if i == j { self.std[i] } else { 0.0 }));
        let shift = g.constant(Tensor::new(1, dim, self.mean.clone())?);
        let y = g.matmul(raw, scale)?;
        g.add(y, shift)
    }
}

/// Parameter nodes of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct GalParams {
    pub w: NodeId,
    pub w_att: NodeId,
    pub v_att: NodeId,
}

/// Parameter nodes in the order produced by [`AgnnModel::init`].
#[derive(Debug, Clone)]
pub struct AgnnParams {
    pub m1: NodeId,
    pub m2: NodeId,
    pub w_a: NodeId,
    pub v_a: NodeId,
    pub layers: Vec<GalParams>,
}

impl AgnnParams {
    pub fn from_ids(ids: &[NodeId]) -> autodiff::Result<Self> {
        if ids.len() < 4 || (ids.len() - 4) % 3 != 0 {
            return Err(autodiff::AdError::Invalid(format!(
                "{} parameter nodes do not form an AGNN",
                ids.len()
            )));
        }
        let layers = ids[4..]
            .chunks(3)
            .map(|c| GalParams {
                w: c[0],
                w_att: c[1],
                v_att: c[2],
            })
            .collect();
        Ok(Self {
            m1: ids[0],
            m2: ids[1],
            w_a: ids[2],
            v_a: ids[3],
            layers,
        })
    }
}

/// Intermediate nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct AgnnTrace {
    pub distances: NodeId,
    pub candidates: Vec<Vec<usize>>,
    pub adjacency: NodeId,
    pub layers: Vec<NodeId>,
    pub output: NodeId,
}

impl AgnnModel {
    /// Draws fresh parameters and fixes `t_h0`, `gamma` and the input
    /// normalization from `x` (all rows, labeled or not) and the output
    /// scaling from the known positions `y`.
    pub fn init(config: AgnnConfig, x: &Tensor, y: &Tensor) -> Result<(Self, ParamSet)> {
        if x.rows() < 2 {
            return Err(contract("AGNN initialization needs at least two nodes"));
        }
        if config.output == 0 {
            return Err(contract("output width must be positive"));
        }
        let f = x.cols();
        let mut rng = seeded_rng(config.seed);
        let mut params = ParamSet::new();
        params.push("dlm.m1", fan_in_uniform(&mut rng, f, config.d_m1));
        params.push("dlm.m2", fan_in_uniform(&mut rng, config.d_m1, config.d_m2));
        params.push("alm.w_a", fan_in_uniform(&mut rng, f, config.f_a));
        params.push("alm.v_a", fan_in_uniform(&mut rng, config.f_a, 1));
        let mut dims = vec![f];
        dims.extend(&config.hidden);
        dims.push(config.output);
        for (k, w) in dims.windows(2).enumerate() {
            params.push(format!("gal{k}.w"), fan_in_uniform(&mut rng, w[0], w[1]));
            params.push(format!("gal{k}.w_att"), fan_in_uniform(&mut rng, 2 * w[1], config.f_att));
            params.push(format!("gal{k}.v_att"), fan_in_uniform(&mut rng, config.f_att, 1));
        }

        let norm = FeatureStats::fit(x)?;
        let xs = norm.standardize(x);
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let p = AgnnParams::from_ids(&ids)?;
        let xc = g.constant(xs);
        let d = dlm_distances(&mut g, &p, xc)?;
        let off = upper_triangle(g.value(d));
        let t_h0 = match config.t_h0 {
            Some(t) => t,
            None => percentile(&off, config.t_h0_percentile),
        };
        let gamma = match config.gamma {
            Some(v) => v,
            None => {
                let med = percentile(&off, 50.0);
                if med <= 0.0 {
                    return Err(contract("initial latent distances are all zero"));
                }
                10.0 / med
            }
        };
        if y.cols() != config.output {
            return Err(contract(format!("labels have {} columns, output is {}", y.cols(), config.output)));
        }
        let target = if config.scale_output {
            TargetScale::fit(y)?
        } else {
            TargetScale::identity(y.cols())
        };
        if !(t_h0 > 0.0) || !(gamma > 0.0) || !t_h0.is_finite() || !gamma.is_finite() {
            return Err(contract(format!("invalid threshold {t_h0} or sharpness {gamma}")));
        }
        Ok((
            Self {
                config,
                norm,
                t_h0,
                gamma,
                target,
            },
            params,
        ))
    }

    /// Forward pass recording every intermediate stage; `output` is in meters.
    pub fn trace(&self, g: &mut Graph, params: &[NodeId], x: &Tensor) -> autodiff::Result<AgnnTrace> {
        if x.cols() != self.norm.dim() {
            return Err(autodiff::AdError::ShapeMismatch {
                op: "agnn_forward",
                lhs: x.shape(),
                rhs: [x.rows(), self.norm.dim()],
            });
        }
        let xs = g.constant(self.norm.standardize(x));
        let mut t = agnn_forward(g, &AgnnParams::from_ids(params)?, xs, self.t_h0, self.gamma, self.config.leaky_slope)?;
        t.output = self.target.apply(g, t.output)?;
        Ok(t)
    }
}

impl Model for AgnnModel {
    fn forward(&self, g: &mut Graph, params: &[NodeId], x: &Tensor) -> autodiff::Result<NodeId> {
        Ok(self.trace(g, params, x)?.output)
    }
}

/// Off-diagonal entries with `i < j`.
pub fn upper_triangle(d: &Tensor) -> Vec<f64> {
    let n = d.rows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(d.get(i, j));
        }
    }
    out
}

/// Latent distances `d_ij = ||l_i - l_j||` with `L = relu(X M1) M2`.
pub fn dlm_distances(g: &mut Graph, p: &AgnnParams, x: NodeId) -> autodiff::Result<NodeId> {
    let h = g.matmul(x, p.m1)?;
    let h = g.relu(h)?;
    let l = g.matmul(h, p.m2)?;
    g.pairwise_dist(l)
}

/// Coarse candidates `{j != i : d_ij < t_h0}` per row.
pub fn alm_coarse(d: &Tensor, t_h0: f64) -> Vec<Vec<usize>> {
    let n = d.rows();
    (0..n)
        .map(|i| (0..n).filter(|&j| j != i && d.get(i, j) < t_h0).collect())
        .collect()
}

/// Soft adjacency over the coarse candidates, symmetrized by elementwise max,
/// with unit self-loops.
pub fn alm_adjacency(
    g: &mut Graph,
    p: &AgnnParams,
    x: NodeId,
    d: NodeId,
    candidates: &[Vec<usize>],
    gamma: f64,
    slope: f64,
) -> autodiff::Result<NodeId> {
    let n = g.value(d).rows();
    let scores = alm_scores(g, p, x, candidates, slope)?;
    let rmax = g.row_max(d)?;
    let rmax = g.broadcast_cols(rmax, n)?;
    let sig = g.sigmoid(scores)?;
    let thresh = g.mul(rmax, sig)?;
    let u = g.sub(d, thresh)?;
    let u = g.scale(u, gamma)?;
    let t = g.tanh(u)?;
    let t = g.neg(t)?;
    let a = g.relu(t)?;
    let mut mask = Tensor::zeros(n, n);
    for (i, row) in candidates.iter().enumerate() {
        for &j in row {
            mask.set(i, j, 1.0);
        }
    }
    let mask = g.constant(mask);
    let a = g.mul(a, mask)?;
    let at = g.transpose(a)?;
    let sum = g.add(a, at)?;
    let diff = g.sub(a, at)?;
    let diff = g.abs(diff)?;
    let both = g.add(sum, diff)?;
    let sym = g.scale(both, 0.5)?;
    let eye = g.constant(Tensor::identity(n));
    g.add(sym, eye)
}

/// Pre-threshold attention scores `e_ij = |phi(x_i W_A) - phi(x_j W_A)| v_A`
/// on candidate pairs, zero elsewhere (`N x N`).
pub fn alm_scores(
    g: &mut Graph,
    p: &AgnnParams,
    x: NodeId,
    candidates: &[Vec<usize>],
    slope: f64,
) -> autodiff::Result<NodeId> {
    let n = candidates.len();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, row) in candidates.iter().enumerate() {
        for &j in row {
            if i < j || !candidates[j].contains(&i) {
                src.push(i);
                dst.push(j);
            }
        }
    }
    if src.is_empty() {
        return Ok(g.constant(Tensor::zeros(n, n)));
    }
    let u = g.matmul(x, p.w_a)?;
    let u = g.leaky_relu(u, slope)?;
    let ui = g.gather_rows(u, src.clone().into())?;
    let uj = g.gather_rows(u, dst.clone().into())?;
    let diff = g.sub(ui, uj)?;
    let diff = g.abs(diff)?;
    let e = g.matmul(diff, p.v_a)?;
    let k = src.len();
    let mut from = Vec::with_capacity(2 * k);
    let mut to = Vec::with_capacity(2 * k);
    for (e_idx, (&i, &j)) in src.iter().zip(&dst).enumerate() {
        from.push(e_idx);
        to.push(i * n + j);
        from.push(e_idx);
        to.push(j * n + i);
    }
    let map = SparseMap::new(from, to, [k, 1], [n, n])?;
    g.sparse_map(e, map)
}

/// One attention layer over the neighbors `{j : a_ij > 0}`:
/// `h'_i = act(sum_j alpha_ij a_ij h_j W)`, with identity `act` on the
/// output layer.
pub fn gal_forward(
    g: &mut Graph,
    h: NodeId,
    a: NodeId,
    layer: &GalParams,
    is_output: bool,
    slope: f64,
) -> autodiff::Result<NodeId> {
    let av = g.value(a);
    let n = av.rows();
    let mut mask = Vec::with_capacity(n * n);
    let mut cells = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let on = av.get(i, j) > 0.0;
            mask.push(on);
            if on {
                cells.push((i, j));
            }
        }
    }
    let mask: Arc<[bool]> = mask.into();
    let hh = g.matmul(h, layer.w)?;
    let width = g.value(hh).cols();
    let top = g.slice_rows(layer.w_att, 0, width)?;
    let bottom = g.slice_rows(layer.w_att, width, width)?;
    let pi = g.matmul(hh, top)?;
    let qj = g.matmul(hh, bottom)?;
    let recv: Arc<[usize]> = cells.iter().map(|c| c.0).collect();
    let send: Arc<[usize]> = cells.iter().map(|c| c.1).collect();
    let zi = g.gather_rows(pi, recv)?;
    let zj = g.gather_rows(qj, send)?;
    let z = g.add(zi, zj)?;
    let z = g.leaky_relu(z, slope)?;
    let e = g.matmul(z, layer.v_att)?;
    let e = g.sparse_map(e, SparseMap::scatter_cells(&cells, [n, n])?)?;
    let alpha = g.masked_softmax(e, mask)?;
    let weights = g.mul(alpha, a)?;
    let out = g.matmul(weights, hh)?;
    if is_output {
        Ok(out)
    } else {
        g.leaky_relu(out, slope)
    }
}

/// DLM, ALM and the attention stack on already-normalized features.
pub fn agnn_forward(
    g: &mut Graph,
    p: &AgnnParams,
    x: NodeId,
    t_h0: f64,
    gamma: f64,
    slope: f64,
) -> autodiff::Result<AgnnTrace> {
    let d = dlm_distances(g, p, x)?;
    let candidates = alm_coarse(g.value(d), t_h0);
    let a = alm_adjacency(g, p, x, d, &candidates, gamma, slope)?;
    let mut h = x;
    let mut layers = Vec::with_capacity(p.layers.len());
    for (k, layer) in p.layers.iter().enumerate() {
        h = gal_forward(g, h, a, layer, k + 1 == p.layers.len(), slope)?;
        layers.push(h);
    }
    Ok(AgnnTrace {
        distances: d,
        candidates,
        adjacency: a,
        layers,
        output: h,
    })
}

/// Initializes on every row of `ds` and trains on its labels.
pub fn train_agnn(ds: &FingerprintDataset, config: AgnnConfig, train: &TrainConfig) -> Result<(AgnnModel, TrainResult)> {
    let (model, init) = AgnnModel::init(config, &ds.x, &ds.y)?;
    let res = crate::model::train(&model, init, &ds.x, &ds.labeled, &ds.y, train)?;
    Ok((model, res))
}
