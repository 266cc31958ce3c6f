//! Per-feature moments, standardization and distribution alignment.

use serde::{Deserialize, Serialize};

use autodiff::Tensor;

use crate::error::{contract, Result};

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn fit(x: &Tensor) -> Result<Self> {
        Self::fit_pooled(&[x])
    }

    /// Moments over the row union of several matrices.
    pub fn fit_pooled(xs: &[&Tensor]) -> Result<Self> {
        let f = xs.first().map_or(0, |x| x.cols());
        if xs.iter().any(|x| x.cols() != f) {
            return Err(contract("pooled matrices differ in feature count"));
        }
        let count: usize = xs.iter().map(|x| x.rows()).sum();
        if count == 0 {
            return Err(contract("cannot fit statistics on zero rows"));
        }
        let mut mean = vec![0.0; f];
        for x in xs {
            for i in 0..x.rows() {
                for (m, v) in mean.iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; f];
        for x in xs {
            for i in 0..x.rows() {
                for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(Self { mean, std, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std` per column; zero-spread columns map to 0.
    pub fn standardize(&self, x: &Tensor) -> Tensor {
        let f = self.dim();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % f;
            *v = if self.std[j] > 0.0 {
                (*v - self.mean[j]) / self.std[j]
            } else {
                0.0
            };
        }
        out
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of `values`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone)]
pub struct Aligned {
    pub x: Tensor,
    /// Columns whose source spread was zero; they were shifted onto the
    /// destination mean instead of rescaled.
    pub passthrough: Vec<usize>,
}

/// Maps each column from the source moments onto the destination moments:
/// `x' = std_dst * (x - mean_src) / std_src + mean_dst`.
pub fn align(x: &Tensor, src: &FeatureStats, dst: &FeatureStats) -> Result<Aligned> {
    let f = x.cols();
    if src.dim() != f || dst.dim() != f {
        return Err(contract(format!(
            "alignment statistics cover {} / {} features, data has {f}",
            src.dim(),
            dst.dim()
        )));
    }
    let passthrough: Vec<usize> = (0..f).filter(|&j| src.std[j] == 0.0).collect();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let j = k % f;
        *v = if src.std[j] > 0.0 {
            dst.std[j] * (*v - src.mean[j]) / src.std[j] + dst.mean[j]
        } else {
            *v - src.mean[j] + dst.mean[j]
        };
    }
    Ok(Aligned { x: out, passthrough })
}
