//! Dataset files, the experiment harness and report files behind the `agml`
//! command-line tool.

pub mod error;
pub mod experiment;
pub mod format;
pub mod metrics;
pub mod report;

pub use error::{Error, Result};
pub use experiment::{
    run_experiment, sweep_npath, CellResult, EvalReport, ExperimentConfig, Method, NpathRow, NpathTable, TracePoint,
};
pub use format::DatasetFile;
pub use metrics::rmse;
pub use report::{export_report, read_report};

/// Environment variable naming the root for relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "AGML_OUTPUT_ROOT";

/// Resolves `path` against `$AGML_OUTPUT_ROOT` when it is relative.
pub fn output_path(path: &std::path::Path) -> std::path::PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => std::path::Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}
