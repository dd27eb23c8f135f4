use serde::Serialize;

use crate::error::{Error, Result};

/// Regression quality of a prediction set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub pearson: f64,
    pub n: usize,
}

/// Mean absolute error and root mean squared error.
pub fn error_metrics(y: &[f64], yhat: &[f64]) -> Result<(f64, f64)> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch { left: y.len(), right: yhat.len() });
    }
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = y.len() as f64;
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok((mae, mse.sqrt()))
}

/// Pearson correlation. A constant vector has no defined correlation and
/// yields [`Error::DegenerateVariance`].
pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch { left: y.len(), right: yhat.len() });
    }
    if y.len() < 2 {
        return Err(Error::DegenerateVariance);
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = yhat.iter().sum::<f64>() / n;
    let (mut cov, mut vy, mut vp) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mp);
        cov += da * db;
        vy += da * da;
        vp += db * db;
    }
    if vy == 0.0 || vp == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((cov / (vy.sqrt() * vp.sqrt())).clamp(-1.0, 1.0))
}

pub fn compute_metrics(y: &[f64], yhat: &[f64]) -> Result<MetricsReport> {
    let (mae, rmse) = error_metrics(y, yhat)?;
    Ok(MetricsReport { mae, rmse, pearson: pearson(y, yhat)?, n: y.len() })
}
