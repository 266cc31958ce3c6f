//! Localization error metrics, in meters.

use autodiff::Tensor;

use crate::error::{Error, Result};

/// Euclidean error per test point.
pub fn point_errors(pred: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || pred.cols() != 2 {
        return Err(Error::Config(format!(
            "predictions {:?} and ground truth {:?} must both be N x 2",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok((0..pred.rows())
        .map(|i| {
            let (p, t) = (pred.row(i), truth.row(i));
            ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt()
        })
        .collect())
}

/// `sqrt(mean_i ||pred_i - truth_i||^2)`.
pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let e = point_errors(pred, truth)?;
    if e.is_empty() {
        return Err(Error::Config("RMSE over zero test points".into()));
    }
    Ok(rmse_of(&e))
}

pub fn rmse_of(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Empirical CDF samples `(error, P[E <= error])`, ascending.
pub fn cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    e.into_iter().enumerate().map(|(i, v)| (v, (i + 1) as f64 / n)).collect()
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
