//! Simulation quality indices.

use crate::error::{Error, Result};

fn check(y: &[f64], y_sim: &[f64]) -> Result<()> {
    if y.len() != y_sim.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "metric needs equal nonempty lengths, got {} and {}",
            y.len(),
            y_sim.len()
        )));
    }
    Ok(())
}

/// `100 (1 - ||y - y_sim|| / ||y - mean(y)||)`, in percent.
pub fn fit_index(y: &[f64], y_sim: &[f64]) -> Result<f64> {
    check(y, y_sim)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let err: f64 = y.iter().zip(y_sim).map(|(a, b)| (a - b).powi(2)).sum();
    let spread: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    if spread == 0.0 {
        return Err(Error::InvalidParams("fit index of a constant signal".into()));
    }
    Ok(100.0 * (1.0 - (err / spread).sqrt()))
}

pub fn rmse(y: &[f64], y_sim: &[f64]) -> Result<f64> {
    check(y, y_sim)?;
    let err: f64 = y.iter().zip(y_sim).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((err / y.len() as f64).sqrt())
}

/// Sample autocorrelation `r(k)/r(0)` for lags `1..=max_lag`, mean removed.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n.max(1) as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let r0: f64 = c.iter().map(|v| v * v).sum();
    (1..=max_lag)
        .map(|k| {
            if k >= n || r0 == 0.0 {
                return 0.0;
            }
            c[k..].iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / r0
        })
        .collect()
}
