use crate::error::{Error, Result};

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch { left: y.len(), right: yhat.len() });
    }
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean squared error `(1/n)·Σ(yᵢ − ŷᵢ)²`.
pub fn mse_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Gradient of [`mse_loss`] with respect to `yhat`: `2(ŷᵢ − yᵢ)/n`.
pub fn mse_loss_backward(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    check(y, yhat)?;
    let n = y.len() as f64;
    Ok(y.iter().zip(yhat).map(|(a, b)| 2.0 * (b - a) / n).collect())
}
