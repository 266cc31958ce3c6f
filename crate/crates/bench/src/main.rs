use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use agml::agnn::{train_agnn, AgnnConfig, AgnnModel};
use agml::baselines::{mlp_train, MlpConfig, MlpModel};
use agml::checkpoint::{Checkpoint, MetaSection, SavedModel};
use agml::meta::{adapt, localize, meta_train, split_labels, MetaConfig, MetaGradMode};
use agml::model::{seeded_rng, Model, ParamSet, TrainConfig};
use agml::signal::{group_by_location, parse_capture, preprocess_location, FeatureLayout, PipelineConfig};
use agml::stats::{align, FeatureStats};
use agml::{FingerprintDataset, Origin};
use autodiff::Tensor;

use agml_bench::experiment::{agml_template, prepare_seed};
use agml_bench::report::{summarize, summary_tsv};
use agml_bench::{
    export_report, output_path, read_report, rmse, run_experiment, sweep_npath, DatasetFile, ExperimentConfig, Method,
};

/// Fingerprint localization toolkit: data generation, preprocessing,
/// training, meta-learning and benchmark reports.
///
/// Relative output paths are resolved under $AGML_OUTPUT_ROOT when it is set.
#[derive(Parser)]
#[command(name = "agml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate synthetic variants and a target environment as dataset files.
    Generate(GenerateArgs),
    /// Turn a raw CSI capture into a dataset file.
    Preprocess(PreprocessArgs),
    /// Train AGNN or MLP on one dataset and save a checkpoint.
    Train(TrainArgs),
    /// Meta-train on synthetic datasets and save the meta-parameters.
    MetaTrain(MetaTrainArgs),
    /// Adapt meta-parameters to a target dataset and localize test points.
    MetaTest(MetaTestArgs),
    /// Run the (method, N_l, seed) grid and write a report.
    Evaluate(ExperimentArgs),
    /// Sweep the number of CIR paths per AP for AGNN.
    SweepNpath(ExperimentArgs),
    /// Summarize a written report (mean and std of RMSE over seeds).
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Agnn,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    FirstOrder,
    SecondOrder,
}

/// Experiment settings. Values from `--config` (TOML, same keys as the
/// experiment configuration) override these flags.
#[derive(Args, Clone)]
struct ExperimentArgs {
    /// TOML experiment configuration; its keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario (hall, empty_room, obstacle_dense) or TOML path.
    #[arg(long)]
    scenario: Option<String>,
    /// Target scenario; default holds out a perturbed variant.
    #[arg(long)]
    target: Option<String>,
    /// Synthetic variants for meta-training.
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    points_per_variant: Option<usize>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Comma-separated N_l grid.
    #[arg(long, value_delimiter = ',')]
    n_l: Option<Vec<usize>>,
    /// Comma-separated methods: knn, wknn, mlp, agnn, agnn_nl, metaloc, agml.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    n_path: Option<usize>,
    /// Comma-separated n_path grid for the sweep.
    #[arg(long, value_delimiter = ',')]
    n_path_grid: Option<Vec<usize>>,
    #[arg(long)]
    sweep_labeled: Option<usize>,
    #[arg(long)]
    agnn_epochs: Option<usize>,
    #[arg(long)]
    mlp_epochs: Option<usize>,
    #[arg(long)]
    meta_epochs: Option<usize>,
    /// Record test RMSE every this many gradient steps (0 disables).
    #[arg(long)]
    trace_every: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Seed for perturbations and positions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Capture file: `location_id ap_id rssi_db K re,im ...` per line.
    #[arg(long)]
    input: PathBuf,
    /// Optional positions: `location_id x y` per line.
    #[arg(long)]
    positions: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    n_path: usize,
    #[arg(long, default_value_t = 0.10)]
    removal_fraction: f64,
    /// Skip amplitude calibration.
    #[arg(long)]
    no_calibrate: bool,
    #[arg(long, default_value = "measured")]
    scenario_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetaTrainArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Synthetic dataset files (fully labeled).
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    n0: usize,
    #[arg(long, default_value_t = 20)]
    n_l: usize,
    #[arg(long, default_value_t = 1e-4)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, value_enum, default_value = "first-order")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetaTestArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target fingerprints; labeled rows drive the adaptation.
    #[arg(long)]
    data: PathBuf,
    /// Test points to localize.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Adaptation steps; default from the checkpoint.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adapted checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Predicted positions as a dataset file.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Directory written by `evaluate`.
    #[arg(long)]
    report: PathBuf,
    /// Where to write `summary.tsv` (and a copy of the report); default is
    /// the report directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set!(
            scenario => scenario,
            variants => variants,
            points_per_variant => points_per_variant,
            n0 => n0,
            n_test => n_test,
            n_l => n_l,
            methods => methods,
            seeds => seeds,
            n_path => n_path,
            n_path_grid => n_path_grid,
            sweep_labeled => sweep_labeled,
            agnn_epochs => agnn_train.epochs,
            mlp_epochs => mlp_train.epochs,
            meta_epochs => meta.meta_epochs,
            trace_every => trace_every,
            out => output_dir,
        );
        if self.target.is_some() {
            c.target = self.target.clone();
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let over: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let mut base = toml::Table::try_from(&c).context("serializing flag settings")?;
            merge(&mut base, over);
            c = base.try_into().with_context(|| format!("applying {}", path.display()))?;
        }
        c.output_dir = output_path(&c.output_dir);
        c.validate()?;
        Ok(c)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::MetaTrain(a) => meta_train_cmd(a),
        Command::MetaTest(a) => meta_test(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SweepNpath(a) => sweep(a),
        Command::Export(a) => export(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = a.exp.resolve()?;
    // Force the synthetic variants to be simulated.
    cfg.methods = vec![Method::Agml.name().to_string()];
    let data = prepare_seed(&cfg, a.seed)?;
    let bandwidth = agml_bench::experiment::load_scenario(&cfg.scenario)?.bandwidth_hz;
    let out = &cfg.output_dir;
    for (v, ds) in data.synthetic.into_iter().enumerate() {
        DatasetFile::new(ds, bandwidth).write(&out.join(format!("variant_{v}.tsv")))?;
    }
    DatasetFile::new(data.train, bandwidth).write(&out.join("target_train.tsv"))?;
    DatasetFile::new(data.test, bandwidth).write(&out.join("target_test.tsv"))?;
    println!("wrote {} variants and the target split to {}", cfg.variants, out.display());
    Ok(())
}

fn read_positions(path: &Path) -> Result<BTreeMap<String, [f64; 2]>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            bail!("{}:{}: expected `location_id x y`", path.display(), n + 1);
        }
        let x: f64 = f[1].parse().with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let y: f64 = f[2].parse().with_context(|| format!("{}:{}", path.display(), n + 1))?;
        out.insert(f[0].to_string(), [x, y]);
    }
    Ok(out)
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let packets = parse_capture(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let bandwidth = packets.first().map(|p| p.bandwidth_hz()).context("capture has no packets")?;
    let positions = match &a.positions {
        Some(p) => read_positions(p)?,
        None => BTreeMap::new(),
    };
    let cfg = PipelineConfig {
        removal_fraction: a.removal_fraction,
        calibrate: !a.no_calibrate,
        ..PipelineConfig::default()
    };
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut layout: Option<FeatureLayout> = None;
    let (mut labeled, mut y) = (Vec::new(), Vec::new());
    for (loc, per_ap) in group_by_location(packets) {
        let out = preprocess_location(&per_ap, a.n_path, &cfg).with_context(|| format!("location {loc}"))?;
        match layout {
            None => layout = Some(out.features.layout),
            Some(l) if l != out.features.layout => {
                bail!("location {loc} has layout {:?}, earlier ones {l:?}", out.features.layout)
            }
            _ => {}
        }
        if let Some(p) = positions.get(&loc) {
            labeled.push(ids.len());
            y.extend_from_slice(p);
        }
        ids.push(loc);
        rows.extend(out.features.values);
    }
    let layout = layout.context("capture has no locations")?;
    let n = ids.len();
    let ds = FingerprintDataset::new(
        Tensor::new(n, layout.dim(), rows)?,
        labeled.clone(),
        Tensor::new(labeled.len(), 2, y)?,
        Origin::Real,
        a.scenario_id,
        layout,
    )?;
    let file = DatasetFile {
        ids,
        dataset: ds,
        bandwidth_hz: bandwidth,
    };
    let out = output_path(&a.out);
    file.write(&out)?;
    println!("{n} fingerprints ({} labeled) -> {}", labeled.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = DatasetFile::read(&a.data)?.dataset;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        ..TrainConfig::default()
    };
    let (saved, res) = match a.model {
        ModelKind::Agnn => {
            let (m, r) = train_agnn(
                &ds,
                AgnnConfig {
                    seed: a.seed,
                    ..AgnnConfig::default()
                },
                &tc,
            )?;
            (SavedModel::Agnn(m), r)
        }
        ModelKind::Mlp => {
            let (m, r) = mlp_train(
                &ds,
                MlpConfig {
                    seed: a.seed,
                    ..MlpConfig::default()
                },
                &tc,
            )?;
            (SavedModel::Mlp(m), r)
        }
    };
    let out = output_path(&a.out);
    Checkpoint::new(saved, &res.params, None).save(&out)?;
    println!(
        "best training loss {:.6} at epoch {} -> {}",
        res.history.get(res.best_epoch).copied().unwrap_or(f64::NAN),
        res.best_epoch,
        out.display()
    );
    Ok(())
}

fn meta_train_cmd(a: MetaTrainArgs) -> Result<()> {
    let datasets: Vec<FingerprintDataset> = a
        .data
        .iter()
        .map(|p| DatasetFile::read(p).map(|f| f.dataset))
        .collect::<agml_bench::Result<_>>()?;
    let cfg = MetaConfig {
        meta_epochs: a.epochs,
        n0: a.n0,
        n_l: a.n_l,
        alpha: a.alpha,
        beta: a.beta,
        mode: match a.mode {
            ModeArg::FirstOrder => MetaGradMode::FirstOrder,
            ModeArg::SecondOrder => MetaGradMode::SecondOrder,
        },
        seed: a.seed,
        ..MetaConfig::default()
    };
    let xs: Vec<&Tensor> = datasets.iter().map(|d| &d.x).collect();
    let pooled = FeatureStats::fit_pooled(&xs)?;
    let (saved, res) = match a.model {
        ModelKind::Agnn => {
            let (m, init) = agml_template(&datasets, &AgnnConfig::default(), a.n0, a.seed)?;
            let r = meta_train(&m, init, &datasets, &cfg)?;
            (SavedModel::Agnn(m), r)
        }
        ModelKind::Mlp => {
            let mlp = MlpConfig {
                seed: a.seed,
                ..MlpConfig::default()
            };
            let (m, init) = MlpModel::init(mlp, pooled.clone())?;
            let r = meta_train(&m, init, &datasets, &cfg)?;
            (SavedModel::Mlp(m), r)
        }
    };
    let meta = MetaSection {
        synthetic_stats: pooled,
        config: cfg,
    };
    let out = output_path(&a.out);
    Checkpoint::new(saved, &res.params, Some(meta)).save(&out)?;
    println!(
        "meta-loss {:.4} -> {:.4} (best epoch {}) -> {}",
        res.history.first().copied().unwrap_or(f64::NAN),
        res.history.last().copied().unwrap_or(f64::NAN),
        res.best_epoch,
        out.display()
    );
    Ok(())
}

fn adapt_and_localize<M: Model>(
    model: &M,
    theta: &ParamSet,
    meta: &MetaSection,
    target: &FingerprintDataset,
    test: Option<&FingerprintDataset>,
    steps: usize,
    seed: u64,
) -> Result<(ParamSet, Option<Tensor>)> {
    let s0 = FeatureStats::fit(&target.x)?;
    let x0 = align(&target.x, &s0, &meta.synthetic_stats)?.x;
    let split = split_labels(target, meta.config.support_fraction, &mut seeded_rng(seed))?;
    let res = adapt(model, theta, &x0, &split, meta.config.zeta(), steps)?;
    let pred = match test {
        Some(t) => {
            let xt = align(&t.x, &s0, &meta.synthetic_stats)?.x;
            Some(localize(model, &res.params, &x0, &xt)?)
        }
        None => None,
    };
    println!("adaptation kept step {} of {steps}", res.best_step);
    Ok((res.params, pred))
}

fn meta_test(a: MetaTestArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let meta = ckpt.meta.clone().context("checkpoint has no meta-learning section")?;
    let theta = ckpt.param_set()?;
    let target = DatasetFile::read(&a.data)?.dataset;
    let test = a.test.as_deref().map(DatasetFile::read).transpose()?;
    let steps = a.steps.unwrap_or(meta.config.adaptation_steps);
    let test_ds = test.as_ref().map(|t| &t.dataset);
    let (params, pred) = match &ckpt.model {
        SavedModel::Agnn(m) => adapt_and_localize::<AgnnModel>(m, &theta, &meta, &target, test_ds, steps, a.seed)?,
        SavedModel::Mlp(m) => adapt_and_localize::<MlpModel>(m, &theta, &meta, &target, test_ds, steps, a.seed)?,
    };
    let out = output_path(&a.out);
    Checkpoint::new(ckpt.model.clone(), &params, Some(meta)).save(&out)?;
    if let (Some(pred), Some(test)) = (pred, test) {
        let t = &test.dataset;
        if t.is_fully_labeled() {
            println!("test RMSE {:.4} m over {} points", rmse(&pred, &t.y)?, t.len());
        }
        if let Some(p) = &a.predictions {
            let ds = FingerprintDataset::new(
                t.x.clone(),
                (0..t.len()).collect(),
                pred,
                Origin::Test,
                t.scenario_id.clone(),
                t.layout,
            )?;
            let file = DatasetFile {
                ids: test.ids.clone(),
                dataset: ds,
                bandwidth_hz: test.bandwidth_hz,
            };
            file.write(&output_path(p))?;
        }
    }
    println!("adapted checkpoint -> {}", out.display());
    Ok(())
}

fn evaluate(a: ExperimentArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let report = run_experiment(&cfg)?;
    export_report(&report, &cfg.output_dir)?;
    print!("{}", summary_tsv(&summarize(&report)));
    println!("report -> {}", cfg.output_dir.display());
    Ok(())
}

fn sweep(a: ExperimentArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let table = sweep_npath(&cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("npath.tsv");
    std::fs::write(&path, table.to_tsv())?;
    print!("{}", table.to_tsv());
    println!("best n_path per seed: {:?}", table.best_per_seed());
    println!("table -> {}", path.display());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let report = read_report(&a.report)?;
    let out = output_path(a.out.as_deref().unwrap_or(&a.report));
    if out != a.report {
        export_report(&report, &out)?;
    }
    std::fs::create_dir_all(&out)?;
    let summary = summary_tsv(&summarize(&report));
    std::fs::write(out.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}
