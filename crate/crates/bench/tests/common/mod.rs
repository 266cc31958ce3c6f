#![allow(dead_code)]

use agml_bench::ExperimentConfig;

/// A configuration small enough to run in a unit-test budget.
pub fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        scenario: "hall".into(),
        variants: 2,
        points_per_variant: 30,
        n0: 20,
        n_test: 10,
        n_l: vec![5],
        methods: vec!["knn".into()],
        seeds: vec![0],
        n_path: 2,
        n_path_grid: vec![2],
        sweep_labeled: 10,
        ..ExperimentConfig::default()
    };
    c.agnn_train.epochs = 5;
    c.mlp_train.epochs = 5;
    c.meta.meta_epochs = 2;
    c.meta.adaptation_steps = 3;
    c
}
