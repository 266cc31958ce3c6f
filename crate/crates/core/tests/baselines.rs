use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agml::baselines::*;
use agml::meta::{meta_train, MetaConfig, MetaGradMode};
use agml::model::{predict, OptimizerKind, TrainConfig};
use agml::signal::FeatureLayout;
use agml::stats::FeatureStats;
use agml::{FingerprintDataset, Origin};
use autodiff::Tensor;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn dataset(seed: u64, n: usize, f: usize) -> FingerprintDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, n, f, -2.0, 2.0);
    let y = random(&mut rng, n, 2, 0.0, 10.0);
    FingerprintDataset::new(
        x,
        (0..n).collect(),
        y,
        Origin::Synthetic(seed as usize),
        "test".into(),
        FeatureLayout { n_ap: 1, n_path: f / 2 },
    )
    .unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn one_neighbor_on_a_training_row() {
    let ds = dataset(1, 15, 4);
    for i in 0..15 {
        let p = knn_predict(&ds.x, &ds.y, ds.x.row(i), 1).unwrap();
        assert_eq!(p, [ds.y.get(i, 0), ds.y.get(i, 1)]);
    }
}

#[test]
fn all_neighbors_give_the_centroid() {
    let ds = dataset(2, 12, 4);
    let p = knn_predict(&ds.x, &ds.y, &[0.3, -0.1, 0.0, 1.0], 12).unwrap();
    for c in 0..2 {
        let mean = (0..12).map(|i| ds.y.get(i, c)).sum::<f64>() / 12.0;
        assert!((p[c] - mean).abs() < 1e-12);
    }
}

#[test]
fn knn_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds = dataset(3, 10, 2);
    for _ in 0..20 {
        let q = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        for k in 1..=10 {
            // Oracle: repeatedly pick the closest unused row.
            let mut used = vec![false; 10];
            let mut sum = [0.0; 2];
            for _ in 0..k {
                let mut best = usize::MAX;
                for i in 0..10 {
                    if !used[i] && (best == usize::MAX || sq_dist(ds.x.row(i), &q) < sq_dist(ds.x.row(best), &q)) {
                        best = i;
                    }
                }
                used[best] = true;
                sum[0] += ds.y.get(best, 0);
                sum[1] += ds.y.get(best, 1);
            }
            let p = knn_predict(&ds.x, &ds.y, &q, k).unwrap();
            assert!((p[0] - sum[0] / k as f64).abs() < 1e-12);
            assert!((p[1] - sum[1] / k as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn knn_argument_checks() {
    let ds = dataset(4, 5, 2);
    assert!(knn_predict(&ds.x, &ds.y, &[0.0, 0.0], 0).is_err());
    assert!(knn_predict(&ds.x, &ds.y, &[0.0, 0.0], 6).is_err());
    assert!(knn_predict(&ds.x, &ds.y, &[0.0], 1).is_err());
    assert!(wknn_predict(&ds.x, &ds.y, &[0.0, 0.0, 0.0], 1).is_err());
}

#[test]
fn nearest_breaks_ties_by_index() {
    let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
    assert_eq!(nearest(&x, &[0.0, 0.0], 2), vec![0, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_ignores_row_order(seed in 0u64..1000, k in 1usize..8, q0 in -2.0f64..2.0, q1 in -2.0f64..2.0) {
        let ds = dataset(seed, 8, 2);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.rotate_left((seed % 8) as usize);
        perm.swap(0, 5);
        let px = ds.x.select_rows(&perm);
        let py = ds.y.select_rows(&perm);
        let a = knn_predict(&ds.x, &ds.y, &[q0, q1], k).unwrap();
        let b = knn_predict(&px, &py, &[q0, q1], k).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }

    #[test]
    fn wknn_weights_are_convex(seed in 0u64..1000, k in 1usize..10, q in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let ds = dataset(seed, 10, 4);
        let (idx, w) = wknn_weights(&ds.x, &q, k);
        prop_assert_eq!(idx.len(), k);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = wknn_predict(&ds.x, &ds.y, &q, k).unwrap();
        for c in 0..2 {
            let lo = idx.iter().map(|&i| ds.y.get(i, c)).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|&i| ds.y.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p[c] >= lo - 1e-9 && p[c] <= hi + 1e-9);
        }
    }
}

#[test]
fn wknn_with_parallel_neighbors_is_knn() {
    // Every training row points the same way as the query: equal weights.
    let x = Tensor::from_rows(&[[1.0, 1.0], [2.0, 2.0], [4.0, 4.0], [8.0, 8.0]]).unwrap();
    let y = Tensor::from_rows(&[[0.0, 0.0], [1.0, 3.0], [5.0, 2.0], [9.0, 9.0]]).unwrap();
    for k in 1..=4 {
        let a = wknn_predict(&x, &y, &[3.0, 3.0], k).unwrap();
        let b = knn_predict(&x, &y, &[3.0, 3.0], k).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }
}

#[test]
fn wknn_scripted_weights() {
    let x = Tensor::from_rows(&[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-3.0, 0.0]]).unwrap();
    let y = Tensor::from_rows(&[[2.0, 0.0], [4.0, 4.0], [0.0, 6.0], [100.0, 100.0]]).unwrap();
    let q = [1.0, 0.2];
    let (idx, w) = wknn_weights(&x, &q, 3);
    assert_eq!(idx, vec![0, 1, 2]);
    let nq = (1.0f64 + 0.04).sqrt();
    let cos = [1.0 / nq, 1.2 / (nq * 2f64.sqrt()), 0.2 / nq];
    let s: f64 = cos.iter().sum();
    for k in 0..3 {
        assert!((w[k] - cos[k] / s).abs() < 1e-12);
    }
    let p = wknn_predict(&x, &y, &q, 3).unwrap();
    let want = [(2.0 * cos[0] + 4.0 * cos[1]) / s, (4.0 * cos[1] + 6.0 * cos[2]) / s];
    assert!((p[0] - want[0]).abs() < 1e-12 && (p[1] - want[1]).abs() < 1e-12);
}

#[test]
fn wknn_identical_neighbor() {
    let ds = dataset(5, 10, 4);
    let (idx, w) = wknn_weights(&ds.x, ds.x.row(6), 1);
    assert_eq!((idx, w), (vec![6], vec![1.0]));
}

#[test]
fn wknn_negative_cosines_fall_back_to_uniform() {
    let x = Tensor::from_rows(&[[-1.0, 0.0], [-2.0, 0.1]]).unwrap();
    let (_, w) = wknn_weights(&x, &[1.0, 0.0], 2);
    assert_eq!(w, vec![0.5, 0.5]);
}

fn small_mlp() -> MlpConfig {
    MlpConfig {
        hidden: vec![16, 16],
        seed: 3,
        ..MlpConfig::default()
    }
}

#[test]
fn mlp_zero_learning_rate_is_frozen() {
    let ds = dataset(6, 10, 4);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 20,
        optimizer: OptimizerKind::Sgd,
    };
    let (model, res) = mlp_train(&ds, small_mlp(), &cfg).unwrap();
    let (_, init) = MlpModel::init(small_mlp(), model.norm.clone()).unwrap();
    assert_eq!(res.params, init);
    assert!(res.history.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn mlp_memorizes_five_points() {
    let ds = dataset(7, 5, 4);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 3000,
        optimizer: OptimizerKind::Adam,
    };
    let (model, res) = mlp_train(&ds, small_mlp(), &cfg).unwrap();
    let yhat = mlp_predict(&model, &res.params, &ds.x).unwrap();
    let rmse = (yhat.zip_map(&ds.y, |a, b| (a - b) * (a - b)).data().iter().sum::<f64>() / 5.0).sqrt();
    assert!(rmse < 1e-2, "{rmse}");
}

#[test]
fn mlp_is_reproducible_and_ignores_unlabeled_rows() {
    let full = dataset(8, 12, 4);
    let ds = full.relabel(&[1, 4, 7, 9]).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let (m1, r1) = mlp_train(&ds, small_mlp(), &cfg).unwrap();
    let (_, r2) = mlp_train(&ds, small_mlp(), &cfg).unwrap();
    assert_eq!(r1.params, r2.params);
    assert_eq!(r1.history, r2.history);
    let only = full.subset(&[1, 4, 7, 9]).unwrap();
    let (m3, r3) = mlp_train(&only, small_mlp(), &cfg).unwrap();
    assert_eq!(m1.norm, m3.norm);
    assert_eq!(r1.params, r3.params);
    // Predictions are row-wise.
    let all = mlp_predict(&m1, &r1.params, &full.x).unwrap();
    let one = mlp_predict(&m1, &r1.params, &full.x.select_rows(&[3])).unwrap();
    assert_eq!(one.row(0), all.row(3));
}

#[test]
fn mlp_rejects_unlabeled_dataset() {
    let ds = dataset(9, 6, 4).relabel(&[]).unwrap();
    assert!(mlp_train(&ds, small_mlp(), &TrainConfig::default()).is_err());
}

fn single_row(seed: u64) -> FingerprintDataset {
    dataset(seed, 1, 4)
}

#[test]
fn metaloc_zero_beta_returns_initialization() {
    let datasets = [dataset(10, 20, 4), dataset(11, 20, 4)];
    let meta = MetaConfig {
        beta: 0.0,
        meta_epochs: 3,
        n0: 10,
        n_l: 4,
        ..MetaConfig::default()
    };
    let (model, res) = metaloc_train(&datasets, small_mlp(), &meta).unwrap();
    let (_, init) = MlpModel::init(small_mlp(), model.norm.clone()).unwrap();
    assert_eq!(res.params, init);
}

#[test]
fn metaloc_single_row_closed_form() {
    // One fingerprint standardizes to zero, so the network output is the
    // final bias b and the loss is ||y - b||. Both meta-gradients are -u
    // with u the unit vector towards y.
    let config = MlpConfig {
        hidden: vec![],
        seed: 4,
        ..MlpConfig::default()
    };
    for mode in [MetaGradMode::FirstOrder, MetaGradMode::SecondOrder] {
        let ds = single_row(12);
        let (alpha, beta) = (0.01, 0.2);
        let meta = MetaConfig {
            alpha,
            beta,
            meta_epochs: 2,
            mode,
            outer: OptimizerKind::Sgd,
            n0: 1,
            n_l: 1,
            ..MetaConfig::default()
        };
        let (model, res) = metaloc_train(std::slice::from_ref(&ds), config.clone(), &meta).unwrap();
        let (_, init) = MlpModel::init(config.clone(), model.norm.clone()).unwrap();
        let b = init.get("mlp0.b").unwrap();
        let y = [ds.y.get(0, 0), ds.y.get(0, 1)];
        let r = ((y[0] - b.get(0, 0)).powi(2) + (y[1] - b.get(0, 1)).powi(2)).sqrt();
        assert!(alpha + beta < r);
        let u = [(y[0] - b.get(0, 0)) / r, (y[1] - b.get(0, 1)) / r];
        assert_eq!(res.best_epoch, 1);
        assert!((res.history[0] - (r - alpha)).abs() < 1e-12);
        assert!((res.history[1] - (r - alpha - beta)).abs() < 1e-12);
        let got = res.params.get("mlp0.b").unwrap();
        for c in 0..2 {
            assert!((got.get(0, c) - (b.get(0, c) + beta * u[c])).abs() < 1e-12, "{mode:?}");
        }
        assert_eq!(res.params.get("mlp0.w"), init.get("mlp0.w"));
    }
}

#[test]
fn metaloc_is_meta_training_the_mlp() {
    let datasets = [dataset(13, 25, 4), dataset(14, 25, 4), dataset(15, 25, 4)];
    let meta = MetaConfig {
        alpha: 1e-3,
        beta: 1e-2,
        meta_epochs: 4,
        n0: 10,
        n_l: 6,
        seed: 2,
        ..MetaConfig::default()
    };
    let (model, res) = metaloc_train(&datasets, small_mlp(), &meta).unwrap();
    let xs: Vec<&Tensor> = datasets.iter().map(|d| &d.x).collect();
    let norm = FeatureStats::fit_pooled(&xs).unwrap();
    assert_eq!(model.norm, norm);
    let (m2, init) = MlpModel::init(small_mlp(), norm).unwrap();
    let direct = meta_train(&m2, init, &datasets, &meta).unwrap();
    assert_eq!(res.params, direct.params);
    assert_eq!(res.history, direct.history);
    let x = datasets[0].x.select_rows(&[0, 1]);
    assert_eq!(predict(&model, &res.params, &x).unwrap(), mlp_predict(&m2, &direct.params, &x).unwrap());
}
