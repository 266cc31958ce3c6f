//! Dataset files.
//!
//! A dataset is a tab-separated text file with one fingerprint per line:
//!
//! ```text
//! id <TAB> x,y <TAB> f_1 <TAB> ... <TAB> f_F
//! ```
//!
//! The position field is empty for unlabeled fingerprints. Lines starting
//! with `#` are comments. Next to `name.tsv` sits `name.tsv.manifest.json`
//! with the layout, bandwidth, scenario id, origin and feature moments.
//! Floats are written in shortest round-trip form, so reading a written
//! file gives back the same bits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use agml::signal::FeatureLayout;
use agml::stats::FeatureStats;
use agml::{FingerprintDataset, Origin};
use autodiff::Tensor;

use crate::error::{io, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scenario_id: String,
    pub origin: Origin,
    pub layout: FeatureLayout,
    /// Channel bandwidth the CIR features were resolved with.
    pub bandwidth_hz: f64,
    pub rows: usize,
    pub labeled: usize,
    /// Moments over all rows.
    pub stats: FeatureStats,
}

/// A dataset together with its row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub ids: Vec<String>,
    pub dataset: FingerprintDataset,
    pub bandwidth_hz: f64,
}

impl DatasetFile {
    /// Row ids default to the row index.
    pub fn new(dataset: FingerprintDataset, bandwidth_hz: f64) -> Self {
        Self {
            ids: (0..dataset.len()).map(|i| i.to_string()).collect(),
            dataset,
            bandwidth_hz,
        }
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let ds = &self.dataset;
        let stats = FeatureStats::fit(&ds.x)?;
        if stats.mean.iter().chain(&stats.std).any(|v| !v.is_finite()) {
            return Err(Error::Config("feature moments overflow; values are too large to store".into()));
        }
        Ok(DatasetManifest {
            format_version: FORMAT_VERSION,
            scenario_id: ds.scenario_id.clone(),
            origin: ds.origin,
            layout: ds.layout,
            bandwidth_hz: self.bandwidth_hz,
            rows: ds.len(),
            labeled: ds.labeled.len(),
            stats,
        })
    }

    pub fn to_tsv(&self) -> Result<String> {
        let ds = &self.dataset;
        if self.ids.len() != ds.len() {
            return Err(Error::Config(format!("{} ids for {} rows", self.ids.len(), ds.len())));
        }
        if let Some(bad) = self.ids.iter().find(|id| id.is_empty() || id.contains(['\t', '\n'])) {
            return Err(Error::Config(format!("row id {bad:?} is empty or contains a tab/newline")));
        }
        let mut s = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(id);
            s.push('\t');
            if let Some([x, y]) = ds.position(i) {
                let _ = write!(s, "{x},{y}");
            }
            for v in ds.x.row(i) {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        std::fs::write(path, self.to_tsv()?).map_err(io(path))?;
        let manifest = serde_json::to_string_pretty(&self.manifest()?)?;
        let mpath = manifest_path(path);
        std::fs::write(&mpath, manifest).map_err(io(mpath))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(io(&mpath))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: mpath,
                line: 1,
                msg: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let body = std::fs::read_to_string(path).map_err(io(path))?;
        let file = parse_tsv(&body, &manifest, path)?;
        if file.dataset.len() != manifest.rows || file.dataset.labeled.len() != manifest.labeled {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: 0,
                msg: format!(
                    "manifest promises {} rows ({} labeled), file has {} ({})",
                    manifest.rows,
                    manifest.labeled,
                    file.dataset.len(),
                    file.dataset.labeled.len()
                ),
            });
        }
        Ok(file)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parse_tsv(text: &str, manifest: &DatasetManifest, path: &Path) -> Result<DatasetFile> {
    let f = manifest.layout.dim();
    let mut ids = Vec::new();
    let mut x = Vec::new();
    let mut labeled = Vec::new();
    let mut y = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + f {
            return Err(err(format!("expected id, position and {f} features, found {} fields", fields.len())));
        }
        let row = ids.len();
        ids.push(fields[0].to_string());
        if !fields[1].is_empty() {
            let (px, py) = fields[1]
                .split_once(',')
                .ok_or_else(|| err(format!("position {:?} is not x,y", fields[1])))?;
            for v in [px, py] {
                y.push(v.parse::<f64>().map_err(|e| err(format!("position {v:?}: {e}")))?);
            }
            labeled.push(row);
        }
        for v in &fields[2..] {
            x.push(v.parse::<f64>().map_err(|e| err(format!("feature {v:?}: {e}")))?);
        }
    }
    let n = ids.len();
    let dataset = FingerprintDataset::new(
        Tensor::new(n, f, x)?,
        labeled.clone(),
        Tensor::new(labeled.len(), 2, y)?,
        manifest.origin,
        manifest.scenario_id.clone(),
        manifest.layout,
    )?;
    Ok(DatasetFile {
        ids,
        dataset,
        bandwidth_hz: manifest.bandwidth_hz,
    })
}
