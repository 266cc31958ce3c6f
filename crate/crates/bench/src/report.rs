//! Report files.
//!
//! `export_report` writes into one directory:
//!
//! - `manifest.json`: format version, config, config hash, seeds, crate
//!   version and the list of data files;
//! - `rmse.tsv`: `method n_l seed rmse seconds`, one line per cell;
//! - `errors.tsv`: `method n_l seed tp error`, per test point;
//! - `cdf.tsv`: `method n_l seed error probability`, ascending per cell;
//! - `traces.tsv`: `method n_l seed step loss rmse` (`rmse` empty when not
//!   recorded at that step).
//!
//! An empty report writes the manifest only. All tables are tab-separated
//! with a header line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};
use crate::experiment::{CellResult, EvalReport, ExperimentConfig, Method, NpathTable, TracePoint};
use crate::metrics::{cdf, mean_std};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

type Key = (Method, usize, u64);

fn key_cols(c: &CellResult) -> String {
    format!("{}\t{}\t{}", c.method, c.n_l, c.seed)
}

fn write(dir: &Path, name: &str, body: String) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(io(&path))?;
    Ok(path)
}

/// Writes the report files; returns the paths written.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    let mut files = Vec::new();
    if !report.cells.is_empty() {
        let mut rmse = String::from("method\tn_l\tseed\trmse\tseconds\n");
        let mut errors = String::from("method\tn_l\tseed\ttp\terror\n");
        let mut cdf_s = String::from("method\tn_l\tseed\terror\tprobability\n");
        let mut traces = String::from("method\tn_l\tseed\tstep\tloss\trmse\n");
        for c in &report.cells {
            let k = key_cols(c);
            let _ = writeln!(rmse, "{k}\t{}\t{}", c.rmse, c.seconds);
            for (tp, e) in c.errors.iter().enumerate() {
                let _ = writeln!(errors, "{k}\t{tp}\t{e}");
            }
            for (e, p) in cdf(&c.errors) {
                let _ = writeln!(cdf_s, "{k}\t{e}\t{p}");
            }
            for t in &c.trace {
                let r = t.rmse.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(traces, "{k}\t{}\t{}\t{r}", t.step, t.loss);
            }
        }
        for (name, body) in [
            ("rmse.tsv", rmse),
            ("errors.tsv", errors),
            ("cdf.tsv", cdf_s),
            ("traces.tsv", traces),
        ] {
            written.push(write(dir, name, body)?);
            files.push(name.to_string());
        }
    }
    let manifest = RunManifest {
        format_version: REPORT_VERSION,
        config_hash: report.config_hash.clone(),
        seeds: report.config.seeds.clone(),
        versions: BTreeMap::from([("agml-bench".to_string(), env!("CARGO_PKG_VERSION").to_string())]),
        files,
        config: report.config.clone(),
    };
    written.push(write(dir, "manifest.json", serde_json::to_string_pretty(&manifest)?)?);
    Ok(written)
}

struct Table {
    path: PathBuf,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(dir: &Path, name: &str, header: &str) -> Result<Table> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => {
            return Err(Error::Format {
                path,
                line: 1,
                msg: format!("expected header {header:?}"),
            })
        }
    }
    let width = header.split('\t').count();
    let mut rows = Vec::new();
    for (n, line) in lines {
        let f: Vec<String> = line.split('\t').map(str::to_string).collect();
        if f.len() != width {
            return Err(Error::Format {
                path,
                line: n + 1,
                msg: format!("expected {width} fields, found {}", f.len()),
            });
        }
        rows.push((n + 1, f));
    }
    Ok(Table { path, rows })
}

impl Table {
    fn parse<T: std::str::FromStr>(&self, line: usize, field: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        field.parse().map_err(|e: T::Err| Error::Format {
            path: self.path.clone(),
            line,
            msg: format!("{field:?}: {e}"),
        })
    }

    fn key(&self, line: usize, f: &[String]) -> Result<Key> {
        Ok((
            f[0].parse().map_err(|e: Error| Error::Format {
                path: self.path.clone(),
                line,
                msg: e.to_string(),
            })?,
            self.parse(line, &f[1])?,
            self.parse(line, &f[2])?,
        ))
    }

    fn unknown(&self, line: usize) -> Error {
        Error::Format {
            path: self.path.clone(),
            line,
            msg: "row refers to a cell missing from rmse.tsv".into(),
        }
    }
}

/// Reads a directory written by [`export_report`].
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    if manifest.format_version != REPORT_VERSION {
        return Err(Error::Format {
            path: mpath,
            line: 1,
            msg: format!("unsupported report version {}", manifest.format_version),
        });
    }
    let mut report = EvalReport {
        config: manifest.config,
        config_hash: manifest.config_hash,
        cells: Vec::new(),
    };
    if manifest.files.is_empty() {
        return Ok(report);
    }
    let mut index: BTreeMap<Key, usize> = BTreeMap::new();
    let t = read_table(dir, "rmse.tsv", "method\tn_l\tseed\trmse\tseconds")?;
    for (line, f) in &t.rows {
        let key = t.key(*line, f)?;
        index.insert(key, report.cells.len());
        report.cells.push(CellResult {
            method: key.0,
            n_l: key.1,
            seed: key.2,
            rmse: t.parse(*line, &f[3])?,
            errors: Vec::new(),
            trace: Vec::new(),
            seconds: t.parse(*line, &f[4])?,
        });
    }
    let t = read_table(dir, "errors.tsv", "method\tn_l\tseed\ttp\terror")?;
    for (line, f) in &t.rows {
        let i = *index.get(&t.key(*line, f)?).ok_or_else(|| t.unknown(*line))?;
        let tp: usize = t.parse(*line, &f[3])?;
        if tp != report.cells[i].errors.len() {
            return Err(Error::Format {
                path: t.path.clone(),
                line: *line,
                msg: format!("test point {tp} out of order"),
            });
        }
        report.cells[i].errors.push(t.parse(*line, &f[4])?);
    }
    let t = read_table(dir, "traces.tsv", "method\tn_l\tseed\tstep\tloss\trmse")?;
    for (line, f) in &t.rows {
        let i = *index.get(&t.key(*line, f)?).ok_or_else(|| t.unknown(*line))?;
        report.cells[i].trace.push(TracePoint {
            step: t.parse(*line, &f[3])?,
            loss: t.parse(*line, &f[4])?,
            rmse: if f[5].is_empty() {
                None
            } else {
                Some(t.parse(*line, &f[5])?)
            },
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub n_l: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Mean and standard deviation of RMSE over seeds, per (method, n_l), in
/// report order.
pub fn summarize(report: &EvalReport) -> Vec<SummaryRow> {
    let mut order: Vec<(Method, usize)> = Vec::new();
    let mut groups: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
    for c in &report.cells {
        let k = (c.method, c.n_l);
        if !groups.contains_key(&k) {
            order.push(k);
        }
        groups.entry(k).or_default().push(c.rmse);
    }
    order
        .into_iter()
        .map(|k| {
            let v = &groups[&k];
            let (mean, std) = mean_std(v);
            SummaryRow {
                method: k.0,
                n_l: k.1,
                mean,
                std,
                seeds: v.len(),
            }
        })
        .collect()
}

pub fn summary_tsv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method\tn_l\tmean_rmse\tstd_rmse\tseeds\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.method, r.n_l, r.mean, r.std, r.seeds);
    }
    s
}

impl NpathTable {
    /// `n_path` then one RMSE column per seed.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# scenario {}\nn_path", self.scenario);
        for seed in &self.seeds {
            let _ = write!(s, "\tseed_{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}", r.n_path);
            for v in &r.rmse {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }
}
