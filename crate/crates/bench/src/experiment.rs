//! Experiment protocol: synthetic variants of a scenario for meta-training,
//! a held-out target environment split into a training graph of `n0`
//! fingerprints (of which `n_l` are labeled) and `n_test` test points.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use agml::agnn::{AgnnConfig, AgnnModel};
use agml::baselines::{knn_predict, metaloc_train, predict_rows, wknn_predict, MlpConfig, MlpModel};
use agml::meta::{adapt_observed, localize, meta_train, split_labels, MetaConfig};
use agml::model::{loss_value, seeded_rng, train_observed, Model, ParamSet, TrainConfig};
use agml::simulate::{
    builtin, dataset_from_cirs, perturb_spec, random_positions, real_like_from_cirs, trace_grid, trace_real_like,
    PerturbationSpec, RealLikeSpec, ScenarioSpec,
};
use agml::stats::{align, FeatureStats};
use agml::{FingerprintDataset, Origin};
use autodiff::Tensor;

use crate::error::{Error, Result};
use crate::metrics::{point_errors, rmse, rmse_of};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Knn,
    Wknn,
    Mlp,
    /// AGNN on the whole training graph (labeled and unlabeled rows).
    Agnn,
    /// AGNN on the labeled rows only.
    AgnnNl,
    Metaloc,
    Agml,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Knn,
        Method::Wknn,
        Method::Mlp,
        Method::Agnn,
        Method::AgnnNl,
        Method::Metaloc,
        Method::Agml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Knn => "knn",
            Method::Wknn => "wknn",
            Method::Mlp => "mlp",
            Method::Agnn => "agnn",
            Method::AgnnNl => "agnn_nl",
            Method::Metaloc => "metaloc",
            Method::Agml => "agml",
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Method::Metaloc | Method::Agml)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in scenario name or path to a scenario TOML file.
    pub scenario: String,
    /// Target environment; `None` holds out one more perturbed variant of
    /// `scenario`.
    pub target: Option<String>,
    /// Synthetic variants used for meta-training (m).
    pub variants: usize,
    /// Perturbation ranges; `count` and `seed` are set per run.
    pub perturbation: PerturbationSpec,
    /// Fingerprints per synthetic variant.
    pub points_per_variant: usize,
    /// Target fingerprints forming the training graph (N0).
    pub n0: usize,
    /// Target test points.
    pub n_test: usize,
    /// Labeled fingerprint counts to evaluate (N_l grid).
    pub n_l: Vec<usize>,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub n_path: usize,
    /// Grid for the n_path sweep.
    pub n_path_grid: Vec<usize>,
    /// Labeled fingerprints in the n_path sweep.
    pub sweep_labeled: usize,
    /// Capture the target with real-like distortions instead of clean
    /// synthesis.
    pub real_like: Option<RealLikeSpec>,
    pub knn_k: usize,
    pub agnn: AgnnConfig,
    pub agnn_train: TrainConfig,
    pub mlp: MlpConfig,
    pub mlp_train: TrainConfig,
    /// `n0`, `n_l` and `seed` are set per cell.
    pub meta: MetaConfig,
    /// Test RMSE is recorded every this many gradient steps; 0 disables.
    pub trace_every: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "hall".into(),
            target: None,
            variants: 6,
            perturbation: PerturbationSpec::default(),
            points_per_variant: 400,
            n0: 200,
            n_test: 200,
            n_l: vec![5, 20],
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            seeds: (0..5).collect(),
            n_path: 3,
            n_path_grid: (1..=5).collect(),
            sweep_labeled: 100,
            real_like: None,
            knn_k: 5,
            agnn: AgnnConfig::default(),
            agnn_train: TrainConfig {
                epochs: 300,
                ..TrainConfig::default()
            },
            mlp: MlpConfig::default(),
            mlp_train: TrainConfig {
                epochs: 300,
                ..TrainConfig::default()
            },
            meta: MetaConfig {
                meta_epochs: 200,
                ..MetaConfig::default()
            },
            trace_every: 0,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let methods = self.methods()?;
        if methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.n0 == 0 || self.n_test == 0 {
            return bad("n0 and n_test must be positive".into());
        }
        if let Some(&l) = self.n_l.iter().find(|&&l| l == 0 || l > self.n0) {
            return bad(format!("n_l = {l} outside 1..={}", self.n0));
        }
        if self.n_l.is_empty() {
            return bad("the n_l grid is empty".into());
        }
        if self.n_path == 0 || self.n_path_grid.contains(&0) {
            return bad("n_path must be positive".into());
        }
        if self.knn_k == 0 {
            return bad("knn_k must be positive".into());
        }
        if methods.iter().any(|m| m.is_meta()) {
            if self.variants == 0 {
                return bad("meta-learning methods need at least one synthetic variant".into());
            }
            if self.points_per_variant < self.n0 {
                return bad(format!(
                    "tasks draw n0 = {} fingerprints but variants only have {}",
                    self.n0, self.points_per_variant
                ));
            }
            for &l in &self.n_l {
                self.meta_for(l, 0).validate()?;
            }
        }
        Ok(())
    }

    /// Meta-learning settings for one cell.
    pub fn meta_for(&self, n_l: usize, seed: u64) -> MetaConfig {
        MetaConfig {
            n0: self.n0,
            n_l,
            seed,
            ..self.meta.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Built-in scenario by name, otherwise a TOML file.
pub fn load_scenario(name: &str) -> Result<ScenarioSpec> {
    if let Some(s) = builtin(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(Error::MissingScenario(name.to_string()));
    }
    let spec = ScenarioSpec::load(path)?;
    spec.validate()?;
    Ok(spec)
}

/// Datasets for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    /// Fully labeled synthetic variants (empty when no meta method runs).
    pub synthetic: Vec<FingerprintDataset>,
    /// Fully labeled training graph; cells keep a subset of the labels.
    pub train: FingerprintDataset,
    pub test: FingerprintDataset,
}

/// Evenly spaced rows of the training graph that keep their labels.
pub fn labeled_rows(n0: usize, n_l: usize) -> Vec<usize> {
    (0..n_l).map(|k| k * n0 / n_l).collect()
}

/// First `n0` rows train, the next `n_test` rows test.
pub fn split_target(all: &FingerprintDataset, n0: usize, n_test: usize) -> Result<(FingerprintDataset, FingerprintDataset)> {
    if all.len() < n0 + n_test {
        return Err(Error::Config(format!("{} target rows for n0 {n0} + n_test {n_test}", all.len())));
    }
    let train_rows: Vec<usize> = (0..n0).collect();
    let test_rows: Vec<usize> = (n0..n0 + n_test).collect();
    let seen: HashSet<usize> = train_rows.iter().copied().collect();
    assert!(
        test_rows.iter().all(|r| !seen.contains(r)),
        "test points overlap the training graph"
    );
    let train = all.subset(&train_rows)?;
    let mut test = all.subset(&test_rows)?;
    test.origin = Origin::Test;
    Ok((train, test))
}

fn target_positions_seed(seed: u64) -> u64 {
    100 + seed
}

fn variant_positions_seed(seed: u64, variant: usize) -> u64 {
    1000 * variant as u64 + seed
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let base = load_scenario(&cfg.scenario)?;
    let pert = PerturbationSpec {
        count: cfg.variants + 1,
        seed,
        ..cfg.perturbation.clone()
    };
    let need_synthetic = cfg.methods()?.iter().any(|m| m.is_meta());
    let mut synthetic = Vec::new();
    if need_synthetic {
        for v in 0..cfg.variants {
            let spec = perturb_spec(&base, &pert, v)?;
            let pos = random_positions(&spec, cfg.points_per_variant, variant_positions_seed(seed, v));
            let cirs = trace_grid(&spec, &pos)?;
            synthetic.push(dataset_from_cirs(&spec, &pos, &cirs, cfg.n_path, Origin::Synthetic(v))?);
        }
    }
    let target = match &cfg.target {
        Some(t) => load_scenario(t)?,
        None => perturb_spec(&base, &pert, cfg.variants)?,
    };
    let pos = random_positions(&target, cfg.n0 + cfg.n_test, target_positions_seed(seed));
    let all = match &cfg.real_like {
        Some(real) => {
            let cirs = trace_real_like(&target, &pos, real, seed)?;
            real_like_from_cirs(&target, &pos, &cirs, cfg.n_path, real, Origin::Real)?
        }
        None => {
            let cirs = trace_grid(&target, &pos)?;
            dataset_from_cirs(&target, &pos, &cirs, cfg.n_path, Origin::Real)?
        }
    };
    let (train, test) = split_target(&all, cfg.n0, cfg.n_test)?;
    Ok(SeedData {
        seed,
        synthetic,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Gradient steps taken so far.
    pub step: usize,
    /// Training loss (query loss during adaptation) at this step.
    pub loss: f64,
    /// Test RMSE, when recorded at this step.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub n_l: usize,
    pub seed: u64,
    pub rmse: f64,
    /// Error per test point, in test order.
    pub errors: Vec<f64>,
    /// Loss per gradient step of the final training phase (adaptation for
    /// meta methods); empty for KNN/WKNN.
    pub trace: Vec<TracePoint>,
    pub seconds: f64,
}

impl CellResult {
    /// First step whose recorded test RMSE is at most `level`.
    pub fn first_step_within(&self, level: f64) -> Option<usize> {
        self.trace
            .iter()
            .find(|p| p.rmse.is_some_and(|r| r <= level))
            .map(|p| p.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Ordered by method (as configured), then n_l, then seed.
    pub cells: Vec<CellResult>,
}

impl EvalReport {
    pub fn empty(config: ExperimentConfig) -> Self {
        Self {
            config_hash: config.hash(),
            config,
            cells: Vec::new(),
        }
    }

    pub fn cell(&self, method: Method, n_l: usize, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.n_l == n_l && c.seed == seed)
    }

    /// Everything except wall-clock times, as JSON.
    pub fn payload(&self) -> String {
        let mut r = self.clone();
        r.cells.iter_mut().for_each(|c| c.seconds = 0.0);
        serde_json::to_string(&r).expect("report serializes")
    }
}

/// Records test RMSE every `every` steps; the first failure is kept.
struct Recorder {
    every: usize,
    rmse: Vec<Option<f64>>,
    err: Option<Error>,
}

impl Recorder {
    fn new(every: usize) -> Self {
        Self {
            every,
            rmse: Vec::new(),
            err: None,
        }
    }

    fn observe(&mut self, step: usize, eval: impl FnOnce() -> Result<f64>) {
        if self.rmse.len() <= step {
            self.rmse.resize(step + 1, None);
        }
        if self.every == 0 || step % self.every != 0 || self.err.is_some() {
            return;
        }
        match eval() {
            Ok(v) => self.rmse[step] = Some(v),
            Err(e) => self.err = Some(e),
        }
    }

    fn finish(self, losses: &[f64]) -> Result<Vec<TracePoint>> {
        if let Some(e) = self.err {
            return Err(e);
        }
        Ok(losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| TracePoint {
                step,
                loss,
                rmse: self.rmse.get(step).copied().flatten(),
            })
            .collect())
    }
}

fn test_rmse<M: Model + ?Sized>(model: &M, params: &ParamSet, x0: &Tensor, xt: &Tensor, truth: &Tensor) -> Result<f64> {
    rmse(&localize(model, params, x0, xt)?, truth)
}

/// Full-batch training with a trace; predicts the test points jointly with
/// the training graph `x0`.
fn fit<M: Model + ?Sized>(
    model: &M,
    init: ParamSet,
    ds: &FingerprintDataset,
    test: &FingerprintDataset,
    train: &TrainConfig,
    every: usize,
) -> Result<(Tensor, Vec<TracePoint>)> {
    let mut rec = Recorder::new(every);
    let mut after_last = None;
    let res = train_observed(model, init, &ds.x, &ds.labeled, &ds.y, train, |step, p| {
        if step == train.epochs {
            after_last = Some(loss_value(model, p, &ds.x, &ds.labeled, &ds.y));
        }
        rec.observe(step, || test_rmse(model, p, &ds.x, &test.x, &test.y))
    })?;
    // History holds the loss before each update.
    let mut losses = res.history.clone();
    if let Some(l) = after_last {
        losses.push(l?);
    }
    let trace = rec.finish(&losses)?;
    Ok((localize(model, &res.params, &ds.x, &test.x)?, trace))
}

#[allow(clippy::too_many_arguments)]
fn meta_then_adapt<M: Model + ?Sized>(
    model: &M,
    theta: &ParamSet,
    norm: &FeatureStats,
    ds: &FingerprintDataset,
    test: &FingerprintDataset,
    meta: &MetaConfig,
    seed: u64,
    every: usize,
) -> Result<(Tensor, Vec<TracePoint>)> {
    // Target moments come from every fingerprint of the training graph.
    let s0 = FeatureStats::fit(&ds.x)?;
    let x0 = align(&ds.x, &s0, norm)?.x;
    let xt = align(&test.x, &s0, norm)?.x;
    let split = split_labels(ds, meta.support_fraction, &mut seeded_rng(seed))?;
    let mut rec = Recorder::new(every);
    let ad = adapt_observed(model, theta, &x0, &split, meta.zeta(), meta.adaptation_steps, |step, p| {
        rec.observe(step, || test_rmse(model, p, &x0, &xt, &test.y))
    })?;
    let trace = rec.finish(&ad.query_history)?;
    Ok((localize(model, &ad.params, &x0, &xt)?, trace))
}

fn knn_like(ds: &FingerprintDataset, test: &FingerprintDataset, k: usize, weighted: bool) -> Result<Tensor> {
    let stats = FeatureStats::fit(&ds.x)?;
    let xl = stats.standardize(&ds.x.select_rows(&ds.labeled));
    let xq = stats.standardize(&test.x);
    let k = k.min(ds.labeled.len());
    Ok(predict_rows(&xq, |q| {
        if weighted {
            wknn_predict(&xl, &ds.y, q, k)
        } else {
            knn_predict(&xl, &ds.y, q, k)
        }
    })?)
}

pub fn run_cell(cfg: &ExperimentConfig, data: &SeedData, method: Method, n_l: usize) -> Result<CellResult> {
    let start = Instant::now();
    let seed = data.seed;
    let ds = data.train.relabel(&labeled_rows(cfg.n0, n_l))?;
    let test = &data.test;
    let every = cfg.trace_every;
    let (pred, trace) = match method {
        Method::Knn => (knn_like(&ds, test, cfg.knn_k, false)?, Vec::new()),
        Method::Wknn => (knn_like(&ds, test, cfg.knn_k, true)?, Vec::new()),
        Method::Mlp => {
            let norm = FeatureStats::fit(&ds.x.select_rows(&ds.labeled))?;
            let (model, init) = MlpModel::init(
                MlpConfig {
                    seed,
                    ..cfg.mlp.clone()
                },
                norm,
            )?;
            fit(&model, init, &ds, test, &cfg.mlp_train, every)?
        }
        Method::Agnn | Method::AgnnNl => {
            let graph = if method == Method::Agnn {
                ds
            } else {
                ds.subset(&ds.labeled)?
            };
            let config = AgnnConfig {
                seed,
                ..cfg.agnn.clone()
            };
            let (model, init) = AgnnModel::init(config, &graph.x, &graph.y)?;
            fit(&model, init, &graph, test, &cfg.agnn_train, every)?
        }
        Method::Metaloc => {
            let meta = cfg.meta_for(n_l, seed);
            let mlp = MlpConfig {
                seed,
                ..cfg.mlp.clone()
            };
            let (model, res) = metaloc_train(&data.synthetic, mlp, &meta)?;
            let norm = model.norm.clone();
            meta_then_adapt(&model, &res.params, &norm, &ds, test, &meta, seed, every)?
        }
        Method::Agml => {
            let meta = cfg.meta_for(n_l, seed);
            let (model, init) = agml_template(&data.synthetic, &cfg.agnn, cfg.n0, seed)?;
            let res = meta_train(&model, init, &data.synthetic, &meta)?;
            let norm = model.norm.clone();
            meta_then_adapt(&model, &res.params, &norm, &ds, test, &meta, seed, every)?
        }
    };
    let errors = point_errors(&pred, &test.y)?;
    Ok(CellResult {
        method,
        n_l,
        seed,
        rmse: rmse_of(&errors),
        errors,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// AGNN meta-parameters initialized on the first `n0` rows of the first
/// synthetic variant, with inputs normalized by the pooled synthetic
/// moments.
pub fn agml_template(
    synthetic: &[FingerprintDataset],
    agnn: &AgnnConfig,
    n0: usize,
    seed: u64,
) -> Result<(AgnnModel, ParamSet)> {
    let first = synthetic
        .first()
        .ok_or_else(|| Error::Config("meta-training needs synthetic datasets".into()))?;
    let rows: Vec<usize> = (0..n0.min(first.len())).collect();
    let tmpl = first.subset(&rows)?;
    let config = AgnnConfig {
        seed,
        ..agnn.clone()
    };
    let (model, init) = AgnnModel::init(config, &tmpl.x, &tmpl.y)?;
    let xs: Vec<&Tensor> = synthetic.iter().map(|d| &d.x).collect();
    let model = AgnnModel {
        norm: FeatureStats::fit_pooled(&xs)?,
        ..model
    };
    Ok((model, init))
}

/// Runs every (method, n_l, seed) cell. Cells run in parallel; the report
/// order is fixed by the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let methods = cfg.methods()?;
    let data: Vec<SeedData> = cfg
        .seeds
        .par_iter()
        .map(|&s| prepare_seed(cfg, s))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for &m in &methods {
        for &l in &cfg.n_l {
            for d in &data {
                jobs.push((m, l, d));
            }
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(m, l, d)| run_cell(cfg, d, m, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpathRow {
    pub n_path: usize,
    /// Test RMSE per seed, in `NpathTable::seeds` order.
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpathTable {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<NpathRow>,
}

impl NpathTable {
    /// The RMSE-minimizing n_path for each seed (smallest on ties).
    pub fn best_per_seed(&self) -> Vec<usize> {
        (0..self.seeds.len())
            .map(|s| {
                self.rows
                    .iter()
                    .min_by(|a, b| a.rmse[s].total_cmp(&b.rmse[s]).then(a.n_path.cmp(&b.n_path)))
                    .map_or(0, |r| r.n_path)
            })
            .collect()
    }
}

/// Per seed, traces the target scenario once and re-extracts features for
/// every n_path from the cached CIRs, then trains and evaluates AGNN.
pub fn sweep_npath(cfg: &ExperimentConfig) -> Result<NpathTable> {
    if cfg.seeds.is_empty() || cfg.n_path_grid.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one n_path".into()));
    }
    cfg.validate()?;
    if cfg.sweep_labeled == 0 || cfg.sweep_labeled > cfg.n0 {
        return Err(Error::Config(format!("sweep_labeled = {} outside 1..={}", cfg.sweep_labeled, cfg.n0)));
    }
    let base = load_scenario(&cfg.scenario)?;
    let per_seed: Vec<Vec<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<f64>> {
            let mut spec = base.clone();
            spec.seed = seed;
            let pos = random_positions(&spec, cfg.n0 + cfg.n_test, target_positions_seed(seed));
            let cirs = trace_grid(&spec, &pos)?;
            cfg.n_path_grid
                .iter()
                .map(|&n_path| {
                    let all = dataset_from_cirs(&spec, &pos, &cirs, n_path, Origin::Real)?;
                    let (train, test) = split_target(&all, cfg.n0, cfg.n_test)?;
                    let ds = train.relabel(&labeled_rows(cfg.n0, cfg.sweep_labeled))?;
                    let config = AgnnConfig {
                        seed,
                        ..cfg.agnn.clone()
                    };
                    let (model, res) = agml::agnn::train_agnn(&ds, config, &cfg.agnn_train)?;
                    test_rmse(&model, &res.params, &ds.x, &test.x, &test.y)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows = cfg
        .n_path_grid
        .iter()
        .enumerate()
        .map(|(k, &n_path)| NpathRow {
            n_path,
            rmse: per_seed.iter().map(|r| r[k]).collect(),
        })
        .collect();
    Ok(NpathTable {
        scenario: cfg.scenario.clone(),
        seeds: cfg.seeds.clone(),
        rows,
    })
}
