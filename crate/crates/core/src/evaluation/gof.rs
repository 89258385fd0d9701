//! Goodness of fit of the posterior cumulative curve against the observed one.

use serde::{Deserialize, Serialize};

use crate::predictive::CumulativeCurve;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GofError {
    #[error("curve grid needs at least 2 points, got {0}")]
    ShortGrid(usize),
    #[error("censor limit must be positive")]
    BadLimit,
}

/// Squared and absolute error summaries. Integrals are trapezoidal over
/// normalized time `t / C`; `abc` and `iae` are rescaled to minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub ise: f64,
    pub rmse_time: f64,
    pub ks: f64,
    /// Same integrand as `ise`, reported under its own name.
    pub cvm: f64,
    pub abc: f64,
    pub iae: f64,
    pub coverage: f64,
    pub avg_band_width: f64,
}

fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
        .sum()
}

pub fn gof_metrics(curve: &CumulativeCurve, censor_limit_min: f64) -> Result<GofReport, GofError> {
    let g = curve.grid_min.len();
    if g < 2 {
        return Err(GofError::ShortGrid(g));
    }
    if !(censor_limit_min > 0.0) {
        return Err(GofError::BadLimit);
    }
    let tau: Vec<f64> = curve.grid_min.iter().map(|t| t / censor_limit_min).collect();
    let d: Vec<f64> = curve
        .posterior_mean
        .iter()
        .zip(&curve.observed)
        .map(|(m, o)| m - o)
        .collect();
    let d2: Vec<f64> = d.iter().map(|v| v * v).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ise = trapezoid(&tau, &d2);
    let iae = censor_limit_min * trapezoid(&tau, &abs);
    let covered = (0..g)
        .filter(|&i| curve.band_low[i] <= curve.observed[i] && curve.observed[i] <= curve.band_high[i])
        .count();
    Ok(GofReport {
        ise,
        rmse_time: (d2.iter().sum::<f64>() / g as f64).sqrt(),
        ks: abs.iter().copied().fold(0.0, f64::max),
        cvm: ise,
        abc: iae,
        iae,
        coverage: covered as f64 / g as f64,
        avg_band_width: curve
            .band_high
            .iter()
            .zip(&curve.band_low)
            .map(|(h, l)| h - l)
            .sum::<f64>()
            / g as f64,
    })
}
