//! Fingerprint datasets shared by the simulator, models and bench harness.

use serde::{Deserialize, Serialize};

use autodiff::Tensor;

use crate::error::{contract, Result};
use crate::signal::FeatureLayout;

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "variant")]
pub enum Origin {
    /// Synthetic variant `i` of a scenario.
    Synthetic(usize),
    /// Measured (or real-like) fingerprints in the target environment.
    Real,
    /// Test points with ground truth, used only for evaluation.
    Test,
}

/// Feature matrix plus labels for a subset of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDataset {
    /// `N x F` features.
    pub x: Tensor,
    /// Row indices with known positions, ascending.
    pub labeled: Vec<usize>,
    /// `|labeled| x 2` positions in meters, aligned with `labeled`.
    pub y: Tensor,
    pub origin: Origin,
    pub scenario_id: String,
    pub layout: FeatureLayout,
}

impl FingerprintDataset {
    pub fn new(
        x: Tensor,
        labeled: Vec<usize>,
        y: Tensor,
        origin: Origin,
        scenario_id: String,
        layout: FeatureLayout,
    ) -> Result<Self> {
        if x.cols() != layout.dim() {
            return Err(contract(format!(
                "feature width {} does not match layout ({} APs x {} paths)",
                x.cols(),
                layout.n_ap,
                layout.n_path
            )));
        }
        if y.rows() != labeled.len() || y.cols() != 2 {
            return Err(contract(format!(
                "labels are {:?} for {} labeled rows",
                y.shape(),
                labeled.len()
            )));
        }
        if labeled.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract("labeled indices must be strictly ascending"));
        }
        if labeled.last().is_some_and(|&i| i >= x.rows()) {
            return Err(contract("labeled index out of range"));
        }
        Ok(Self {
            x,
            labeled,
            y,
            origin,
            scenario_id,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labeled.len() == self.len()
    }

    /// Position of row `i`, if labeled.
    pub fn position(&self, i: usize) -> Option<[f64; 2]> {
        self.labeled
            .binary_search(&i)
            .ok()
            .map(|k| [self.y.get(k, 0), self.y.get(k, 1)])
    }

    /// Rows `rows` (in the given order) as a new dataset; labels follow
    /// their rows.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(contract(format!("row {bad} out of range for {} rows", self.len())));
        }
        let x = self.x.select_rows(rows);
        let mut labeled = Vec::new();
        let mut y = Vec::new();
        for (new, &old) in rows.iter().enumerate() {
            if let Some(p) = self.position(old) {
                labeled.push(new);
                y.extend_from_slice(&p);
            }
        }
        let y = Tensor::new(labeled.len(), 2, y)?;
        Self::new(x, labeled, y, self.origin, self.scenario_id.clone(), self.layout)
    }

    /// Keeps labels only on `keep` (indices into this dataset's rows, must
    /// currently be labeled).
    pub fn relabel(&self, keep: &[usize]) -> Result<Self> {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut y = Vec::with_capacity(keep.len() * 2);
        for &i in &keep {
            let p = self
                .position(i)
                .ok_or_else(|| contract(format!("row {i} has no label to keep")))?;
            y.extend_from_slice(&p);
        }
        let y = Tensor::new(keep.len(), 2, y)?;
        Self::new(self.x.clone(), keep, y, self.origin, self.scenario_id.clone(), self.layout)
    }
}
