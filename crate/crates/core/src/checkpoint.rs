//! Versioned JSON checkpoints for trained models.
//!
//! Layout (version 1):
//!
//! ```json
//! {
//!   "format": "agml-checkpoint",
//!   "version": 1,
//!   "model": { "kind": "agnn" | "mlp", ... hyperparameters and normalization },
//!   "params": [ { "name": "dlm.m1", "shape": [F, 20], "data": [...] }, ... ],
//!   "meta": null | { "synthetic_stats": {...}, "config": {...} }
//! }
//! ```
//!
//! Parameter data is row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use autodiff::Tensor;

use crate::agnn::AgnnModel;
use crate::baselines::MlpModel;
use crate::error::{contract, Result};
use crate::meta::MetaConfig;
use crate::model::ParamSet;
use crate::stats::FeatureStats;

pub const FORMAT: &str = "agml-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedModel {
    Agnn(AgnnModel),
    Mlp(MlpModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Meta-learning context needed to reuse meta-parameters on a new target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSection {
    /// Feature moments the target data is aligned onto.
    pub synthetic_stats: FeatureStats,
    pub config: MetaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: SavedModel,
    pub params: Vec<ParamRecord>,
    pub meta: Option<MetaSection>,
}

impl Checkpoint {
    pub fn new(model: SavedModel, params: &ParamSet, meta: Option<MetaSection>) -> Self {
        let params = params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| ParamRecord {
                name: n.clone(),
                shape: t.shape(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model,
            params,
            meta,
        }
    }

    pub fn param_set(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for r in &self.params {
            p.push(r.name.clone(), Tensor::new(r.shape[0], r.shape[1], r.data.clone())?);
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.format != FORMAT {
            return Err(contract(format!("not a checkpoint (format {:?})", c.format)));
        }
        if c.version != VERSION {
            return Err(contract(format!("unsupported checkpoint version {}", c.version)));
        }
        c.param_set()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
