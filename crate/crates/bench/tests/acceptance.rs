//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

#[path = "../../autodiff/tests/support/mod.rs"]
mod op_support;

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agml::agnn::{alm_adjacency, alm_coarse, alm_scores, dlm_distances, upper_triangle, AgnnConfig, AgnnModel, AgnnParams};
use agml::baselines::{Activation, MlpConfig, MlpModel};
use agml::meta::{meta_gradient, meta_objective, sample_task, task_meta_gradient, MetaGradMode};
use agml::model::{Model, ParamSet};
use agml::signal::{
    calibrate_amplitude, centered_index, cir_to_csi, csi_to_cir, mahalanobis_distances, sanitize_phase, unwrap_phase,
    CsiPacket, FeatureLayout, GuardMap, PhaseMode, SUPPORTED_SUBCARRIERS,
};
use agml::stats::{align, percentile, FeatureStats};
use agml::{FingerprintDataset, Origin};
use agml_bench::{run_experiment, sweep_npath, EvalReport, ExperimentConfig, Method};
use autodiff::{grad_check, Graph, Tensor};

/// Seeds that must agree for a trend criterion.
const MAJORITY: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn small_agnn(seed: u64) -> AgnnConfig {
    AgnnConfig {
        d_m1: 4,
        d_m2: 3,
        f_a: 5,
        f_att: 4,
        hidden: vec![5],
        seed,
        ..AgnnConfig::default()
    }
}

fn gradient_integrity() -> Outcome {
    let mut worst_op = (String::new(), 0.0f64);
    for (name, make) in op_support::op_cases() {
        for seed in 0..100 {
            let case = make(&mut ChaCha8Rng::seed_from_u64(seed));
            let e = grad_check(&case.f, &case.point, 1e-6).unwrap().max_rel_err();
            if e > worst_op.1 {
                worst_op = (name.to_string(), e);
            }
        }
    }
    let mut worst_agnn = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = random(&mut rng, 6, 3, -1.0, 1.0);
        let y = random(&mut rng, 6, 2, 0.0, 4.0);
        let config = AgnnConfig {
            t_h0: Some(1e6),
            gamma: Some(rng.random_range(0.2..2.0)),
            ..small_agnn(seed)
        };
        let (model, params) = AgnnModel::init(config, &x, &y).unwrap();
        let labeled = [0, 2, 3, 5];
        let yl = y.select_rows(&labeled);
        let point: Vec<(String, Tensor)> = params.names.iter().cloned().zip(params.tensors.iter().cloned()).collect();
        let report = grad_check(
            |g, ids| model.loss(g, ids, &x, &labeled, &yl).map_err(Into::into),
            &point,
            1e-5,
        )
        .unwrap();
        worst_agnn = worst_agnn.max(report.max_norm_rel_err());
    }
    outcome(
        worst_op.1 < 1e-5 && worst_agnn < 1e-5,
        format!(
            "worst op {} {:.1e}, AGNN loss {:.1e} (< 1e-5)",
            worst_op.0, worst_op.1, worst_agnn
        ),
    )
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn meta_dataset(seed: u64) -> FingerprintDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FingerprintDataset::new(
        random(&mut rng, 12, 4, -2.0, 2.0),
        (0..12).collect(),
        random(&mut rng, 12, 2, 0.0, 10.0),
        Origin::Synthetic(0),
        "acceptance".into(),
        FeatureLayout { n_ap: 1, n_path: 2 },
    )
    .unwrap()
}

fn tiny_mlp(seed: u64) -> (MlpModel, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = FeatureStats::fit(&random(&mut rng, 20, 4, -2.0, 2.0)).unwrap();
    let config = MlpConfig {
        hidden: vec![5],
        activation: Activation::Tanh,
        seed,
        ..MlpConfig::default()
    };
    MlpModel::init(config, norm).unwrap()
}

fn maml_correctness() -> Outcome {
    let (mut worst_fd, mut worst_fo, mut max_params) = (0.0f64, 0.0f64, 0);
    for seed in 0..5u64 {
        let ds = meta_dataset(40 + seed);
        let (model, params) = tiny_mlp(seed);
        max_params = max_params.max(params.size());
        let tasks = vec![
            sample_task(&ds, 0, 12, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
            sample_task(&ds, 0, 10, 6, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 50)).unwrap(),
        ];
        let alpha = 0.3;
        let (_, g) = meta_gradient(&model, &params, &tasks, alpha, MetaGradMode::SecondOrder).unwrap();
        let h = 1e-5;
        let mut fd = Vec::new();
        for (p, t) in params.tensors.iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = params.clone();
                plus.tensors[p].data_mut()[k] += h;
                let mut minus = params.clone();
                minus.tensors[p].data_mut()[k] -= h;
                let d = meta_objective(&model, &plus, &tasks, alpha).unwrap()
                    - meta_objective(&model, &minus, &tasks, alpha).unwrap();
                fd.push(d / (2.0 * h));
            }
        }
        worst_fd = worst_fd.max(norm_rel(&flat(&g), &fd));

        let (_, g1) = task_meta_gradient(&model, &params, &tasks[0], 1e-8, MetaGradMode::FirstOrder).unwrap();
        let (_, g2) = task_meta_gradient(&model, &params, &tasks[0], 1e-8, MetaGradMode::SecondOrder).unwrap();
        worst_fo = worst_fo.max(norm_rel(&flat(&g1), &flat(&g2)));
    }
    outcome(
        max_params <= 50 && worst_fd < 1e-4 && worst_fo < 1e-3,
        format!("{max_params} params; SO vs FD {worst_fd:.1e} (< 1e-4); FO vs SO at alpha=1e-8 {worst_fo:.1e} (< 1e-3)"),
    )
}

fn packet(k: usize, mut f: impl FnMut(i64) -> Complex64) -> CsiPacket {
    CsiPacket::new("tp", 0, 0.0, (0..k).map(|i| f(centered_index(i, k))).collect()).unwrap()
}

fn random_packet(rng: &mut ChaCha8Rng, k: usize) -> CsiPacket {
    packet(k, |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn signal_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dft = 0.0f64;
    for _ in 0..20 {
        for k in SUPPORTED_SUBCARRIERS {
            for guards in [GuardMap::None, GuardMap::Standard] {
                let p = random_packet(&mut rng, k);
                let mask = guards.mask(k).unwrap();
                let back = cir_to_csi(&csi_to_cir(&p, &guards).unwrap()).unwrap();
                for i in 0..k {
                    let want = if mask[i] { Complex64::new(0.0, 0.0) } else { p.subcarriers[i] };
                    dft = dft.max((back[i] - want).norm());
                }
            }
        }
    }
    let mut energy = 0.0f64;
    for _ in 0..100 {
        let gain = 10f64.powf(rng.random_range(-3.0..3.0));
        let rssi = rng.random_range(-90.0..30.0);
        let base = random_packet(&mut rng, 64);
        let n = rng.random_range(1..9);
        let packets: Vec<CsiPacket> = (0..n)
            .map(|_| {
                let mut p = base.clone();
                p.subcarriers.iter_mut().for_each(|h| *h *= gain);
                p.rssi_db = rssi;
                p
            })
            .collect();
        let target = 10f64.powf(rssi / 10.0);
        for p in calibrate_amplitude(&packets).unwrap().packets {
            energy = energy.max(((p.energy() - target) / target).abs());
        }
    }
    let mut unwrap_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(2..80);
        let phases: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let u = unwrap_phase(&phases);
        unwrap_ok &= u.windows(2).all(|w| {
            let d = w[1] - w[0];
            d > -PI && d <= PI
        });
    }
    let mut ranking_ok = true;
    for _ in 0..50 {
        let dim = 4;
        let samples: Vec<Vec<f64>> = (0..30).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                3.0 + rng.random_range(0.0..1.0)
            } else {
                rng.random_range(-0.5..0.5)
            }
        });
        let b = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let moved: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| (&a * DVector::from_column_slice(s) + &b).iter().copied().collect())
            .collect();
        let (d0, _) = mahalanobis_distances(&samples).unwrap();
        let (d1, _) = mahalanobis_distances(&moved).unwrap();
        let rank = |d: &[f64]| {
            let mut o: Vec<usize> = (0..d.len()).collect();
            o.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
            o
        };
        let (r0, r1) = (rank(&d0), rank(&d1));
        ranking_ok &= r0.iter().zip(&r1).all(|(i, j)| i == j || (d0[*i] - d0[*j]).abs() < 1e-8);
    }
    let mut linear = 0.0f64;
    for _ in 0..50 {
        let (slope, icpt) = (rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0));
        let p = packet(64, |c| Complex64::from_polar(1.0, slope * c as f64 + icpt));
        let (_, fit) = sanitize_phase(&p, &GuardMap::None, PhaseMode::Residual).unwrap();
        linear = linear.max(fit.output.iter().fold(0.0, |m, r| m.max(r.abs())));
    }
    outcome(
        dft < 1e-9 && energy < 1e-9 && unwrap_ok && ranking_ok && linear < 1e-10,
        format!(
            "DFT roundtrip {dft:.1e}; energy {energy:.1e}; unwrap in (-pi, pi] {unwrap_ok}; \
             Mahalanobis ranking invariant {ranking_ok}; linear-phase residual {linear:.1e}"
        ),
    )
}

fn adjacency_invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200u64 {
        let n = rng.random_range(3..9);
        let gamma = rng.random_range(0.1..20.0);
        let pct = rng.random_range(20.0..100.0);
        let x = random(&mut rng, n, 3, -2.0, 2.0);
        let (model, params) = AgnnModel::init(small_agnn(case), &x, &Tensor::zeros(n, 2)).unwrap();
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let p = AgnnParams::from_ids(&ids).unwrap();
        let xc = g.constant(model.norm.standardize(&x));
        let d = dlm_distances(&mut g, &p, xc).unwrap();
        let t_h0 = percentile(&upper_triangle(g.value(d)), pct) + 1e-9;
        let cand = alm_coarse(g.value(d), t_h0);
        let e = alm_scores(&mut g, &p, xc, &cand, 0.01).unwrap();
        let a = alm_adjacency(&mut g, &p, xc, d, &cand, gamma, 0.01).unwrap();
        let (dv, ev, av) = (g.value(d).clone(), g.value(e).clone(), g.value(a).clone());
        let thresh = |i: usize, j: usize| {
            let rmax = dv.row(i).iter().cloned().fold(f64::MIN, f64::max);
            rmax / (1.0 + (-ev.get(i, j)).exp())
        };
        for i in 0..n {
            if av.get(i, i) != 1.0 {
                failures.push(format!("case {case}: a_ii != 1"));
            }
            for j in 0..n {
                if av.get(i, j) != av.get(j, i) || ev.get(i, j) != ev.get(j, i) {
                    failures.push(format!("case {case}: asymmetric at ({i}, {j})"));
                }
                if i == j {
                    continue;
                }
                let v = av.get(i, j);
                let (tij, tji) = (thresh(i, j), thresh(j, i));
                // tanh rounds to exactly 1 once gamma * margin exceeds ~19.
                let resolvable = gamma * (dv.get(i, j) - tij).abs() < 18.0 && gamma * (dv.get(j, i) - tji).abs() < 18.0;
                if !(0.0..=1.0).contains(&v) || (resolvable && v >= 1.0) {
                    failures.push(format!("case {case}: a = {v} outside [0, 1)"));
                }
                let outside_i = dv.get(i, j) >= tij || !cand[i].contains(&j);
                let outside_j = dv.get(j, i) >= tji || !cand[j].contains(&i);
                if outside_i && outside_j && v != 0.0 {
                    failures.push(format!("case {case}: a = {v} beyond both thresholds"));
                }
            }
        }
    }
    // Monotonicity in d_01 with the row maxima pinned.
    for case in 0..50u64 {
        let gamma = rng.random_range(0.1..20.0);
        let x = random(&mut rng, 4, 3, -2.0, 2.0);
        let (_, params) = AgnnModel::init(small_agnn(case), &x, &Tensor::zeros(4, 2)).unwrap();
        let base = random(&mut rng, 4, 4, 0.5, 3.0);
        let mut last = f64::INFINITY;
        for step in 0..40 {
            let d01 = 0.2 * step as f64;
            let d = Tensor::from_fn(4, 4, |i, j| match (i.min(j), i.max(j)) {
                (a, b) if a == b => 0.0,
                (0, 1) => d01,
                (0, 3) | (1, 3) => 10.0,
                (a, b) => base.get(a, b),
            });
            let mut g = Graph::new();
            let ids = params.register(&mut g);
            let p = AgnnParams::from_ids(&ids).unwrap();
            let xc = g.constant(x.clone());
            let dc = g.constant(d.clone());
            let a = alm_adjacency(&mut g, &p, xc, dc, &alm_coarse(&d, f64::INFINITY), gamma, 0.01).unwrap();
            let v = g.value(a).get(0, 1);
            if v > last {
                failures.push(format!("monotonicity case {case}: {v} > {last} at d = {d01}"));
            }
            last = v;
        }
    }
    let mut step_err = 0.0f64;
    for gamma in [0.5, 3.0, 40.0, 1000.0] {
        for k in 0..400 {
            let mag = 5.0 / gamma * (1.0 + k as f64 * 0.05);
            let u = if k % 2 == 0 { mag } else { -mag };
            let mut g = Graph::new();
            let un = g.constant(Tensor::scalar(u));
            let s = g.scale(un, gamma).unwrap();
            let t = g.tanh(s).unwrap();
            let r = g.relu(t).unwrap();
            let step = if u > 0.0 { 1.0 } else { 0.0 };
            step_err = step_err.max((g.value(r).item() - step).abs());
        }
    }
    let pass = failures.is_empty() && step_err < 1e-4;
    let mut detail = format!("{} violations; step approximation {step_err:.1e} (< 1e-4)", failures.len());
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first: {f}"));
    }
    outcome(pass, detail)
}

fn alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut moments, mut inverse) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let x = random(&mut rng, 40, 6, -90.0, -20.0);
        let s0 = FeatureStats::fit(&x).unwrap();
        let dst = FeatureStats::fit(&random(&mut rng, 30, 6, 0.0, 100.0)).unwrap();
        let out = align(&x, &s0, &dst).unwrap();
        let got = FeatureStats::fit(&out.x).unwrap();
        for j in 0..6 {
            moments = moments.max((got.mean[j] - dst.mean[j]).abs()).max((got.std[j] - dst.std[j]).abs());
        }
        let back = align(&out.x, &dst, &s0).unwrap();
        inverse = inverse.max(back.x.max_abs_diff(&x));
    }
    outcome(
        moments < 1e-9 && inverse < 1e-12,
        format!("moments {moments:.1e} (< 1e-9); inverse {inverse:.1e} (< 1e-12)"),
    )
}

fn rmse_of(r: &EvalReport, m: Method, n_l: usize, seed: u64) -> f64 {
    r.cell(m, n_l, seed).unwrap_or_else(|| panic!("missing cell {m} {n_l} {seed}")).rmse
}

/// Seeds where `better` has strictly lower RMSE than `worse`.
fn wins(r: &EvalReport, better: Method, worse: Method, n_l: usize) -> usize {
    r.config
        .seeds
        .iter()
        .filter(|&&s| rmse_of(r, better, n_l, s) < rmse_of(r, worse, n_l, s))
        .count()
}

fn semi_supervision(a: &EvalReport) -> Outcome {
    let counts: Vec<(usize, usize)> = [5, 20].iter().map(|&l| (l, wins(a, Method::Agnn, Method::AgnnNl, l))).collect();
    outcome(
        counts.iter().all(|c| c.1 >= MAJORITY),
        counts
            .iter()
            .map(|(l, w)| format!("N_l={l}: AGNN < AGNN_Nl in {w}/5"))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn meta_benefit(a: &EvalReport, b: &EvalReport) -> Outcome {
    let seeds = &a.config.seeds;
    let agml = seeds
        .iter()
        .filter(|&&s| rmse_of(b, Method::Agml, 5, s) < rmse_of(a, Method::Agnn, 5, s))
        .count();
    let metaloc = seeds
        .iter()
        .filter(|&&s| rmse_of(b, Method::Metaloc, 5, s) < rmse_of(a, Method::Mlp, 5, s))
        .count();
    outcome(
        agml >= MAJORITY && metaloc >= MAJORITY,
        format!("N_l=5: AGML < AGNN in {agml}/5; MetaLoc < MLP in {metaloc}/5"),
    )
}

fn convergence(b: &EvalReport) -> Outcome {
    let mut ok = 0;
    let mut notes = Vec::new();
    for &s in &b.config.seeds {
        let agml = b.cell(Method::Agml, 5, s).unwrap();
        let agnn = b.cell(Method::Agnn, 5, s).unwrap();
        let level = 1.2 * agml.rmse;
        let reach = agml.first_step_within(level);
        let scratch = agnn.first_step_within(level);
        let fast = reach.is_some_and(|k| k <= 100);
        let slow = scratch.is_none_or(|k| k > 500);
        if fast && slow {
            ok += 1;
        }
        let show = |v: Option<usize>| v.map_or("never".to_string(), |k| k.to_string());
        notes.push(format!("seed {s}: AGML {} / AGNN {}", show(reach), show(scratch)));
    }
    outcome(ok >= MAJORITY, format!("{ok}/5 seeds ({})", notes.join(", ")))
}

fn baseline_ordering(a: &EvalReport) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for &l in &a.config.n_l {
        let k = a
            .config
            .seeds
            .iter()
            .filter(|&&s| rmse_of(a, Method::Wknn, l, s) <= rmse_of(a, Method::Knn, l, s))
            .count();
        ok &= 2 * k > a.config.seeds.len();
        notes.push(format!("N_l={l}: WKNN <= KNN in {k}/5"));
    }
    outcome(ok, notes.join("; "))
}

fn npath_sweep() -> Outcome {
    let run = |scenario: &str| {
        let cfg = ExperimentConfig {
            scenario: scenario.into(),
            ..ExperimentConfig::default()
        };
        sweep_npath(&cfg).unwrap().best_per_seed()
    };
    let empty = run("empty_room");
    let dense = run("obstacle_dense");
    let e = empty.iter().filter(|&&b| b == 1).count();
    let d = dense.iter().filter(|&&b| b > 1).count();
    outcome(
        e >= MAJORITY && d >= MAJORITY,
        format!("empty_room argmin {empty:?} (=1 in {e}/5); obstacle_dense argmin {dense:?} (>1 in {d}/5)"),
    )
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, limit: Option<f64>, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        let secs = t.elapsed().as_secs_f64();
        if let Some(limit) = limit {
            if secs >= limit {
                o.pass = false;
                o.detail.push_str(&format!("; over the {limit:.0} s budget"));
            }
        }
        println!("[{}] {id:>2} {name}: {} ({secs:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };

    run(1, "gradient integrity", Some(60.0), &gradient_integrity);
    run(2, "second-order meta-gradient", None, &maml_correctness);
    run(3, "signal pipeline identities", Some(30.0), &signal_identities);
    run(4, "adjacency invariants", Some(30.0), &adjacency_invariants);
    run(5, "alignment identity", None, &alignment);

    // Table-style grid for the non-meta methods.
    let cfg_a = ExperimentConfig {
        methods: ["knn", "wknn", "mlp", "agnn", "agnn_nl"].map(String::from).to_vec(),
        ..ExperimentConfig::default()
    };
    // Meta methods, traced per step, plus a longer from-scratch AGNN.
    let mut cfg_b = ExperimentConfig {
        methods: ["metaloc", "agml", "agnn"].map(String::from).to_vec(),
        n_l: vec![5],
        trace_every: 1,
        ..ExperimentConfig::default()
    };
    cfg_b.agnn_train.epochs = 500;
    let t = Instant::now();
    let a = run_experiment(&cfg_a).unwrap();
    let b = run_experiment(&cfg_b).unwrap();
    println!("   experiments ran in {:.1} s", t.elapsed().as_secs_f64());
    for c in a.cells.iter().chain(&b.cells) {
        println!("   {}\tN_l={}\tseed {}\tRMSE {:.3} m", c.method, c.n_l, c.seed, c.rmse);
    }

    run(6, "semi-supervision trend", None, &|| semi_supervision(&a));
    run(7, "meta-learning benefit", None, &|| meta_benefit(&a, &b));
    run(8, "adaptation convergence", None, &|| convergence(&b));
    run(9, "WKNN vs KNN", None, &|| baseline_ordering(&a));
    run(10, "n_path sweep", None, &npath_sweep);

    let total = start.elapsed().as_secs_f64();
    let budget = outcome(total < 1200.0, format!("{total:.0} s (< 1200 s)"));
    println!("[{}] 11 runtime budget: {}", if budget.pass { "PASS" } else { "FAIL" }, budget.detail);
    results.push((11, "runtime budget", budget, total));

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| format!("{} {}", r.0, r.1))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
