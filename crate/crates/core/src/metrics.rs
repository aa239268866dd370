//! Forecast error metrics and the trimmed multi-run protocol.

use crate::error::{dim_err, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    /// Number of compared scalar values.
    pub n: usize,
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn report(y: &[f64], y_hat: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mse: mse(y, y_hat)?,
        mae: mae(y, y_hat)?,
        n: y.len(),
    })
}

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(dim_err!("metric inputs differ in length: {} vs {}", y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(Error::Usage("metrics need at least one value".into()));
    }
    Ok(())
}

/// Mean after dropping one minimum and one maximum; needs at least 3 runs.
pub fn trimmed_mean(runs: &[f64]) -> Result<f64> {
    if runs.len() < 3 {
        return Err(Error::Usage(format!("trimmed mean needs at least 3 runs, got {}", runs.len())));
    }
    let mut sorted = runs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kept = &sorted[1..sorted.len() - 1];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Trims each metric independently across runs.
pub fn trimmed_report(runs: &[MetricsReport]) -> Result<MetricsReport> {
    let mses: Vec<f64> = runs.iter().map(|r| r.mse).collect();
    let maes: Vec<f64> = runs.iter().map(|r| r.mae).collect();
    Ok(MetricsReport {
        mse: trimmed_mean(&mses)?,
        mae: trimmed_mean(&maes)?,
        n: runs.first().map_or(0, |r| r.n),
    })
}
