//! Posterior-predictive admission probabilities and the cumulative admission
//! curve over void time.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, PreparedDataset};
use crate::diagnostics::quantile_sorted;
use crate::model::{observation_logit, predict_logit, ConstrainedParams, EvidenceState, ModelConfig, RangeError};
use crate::special::logistic;

pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, thiserror::Error)]
pub enum PredictiveError {
    #[error("no voided patients")]
    NoVoided,
    #[error("no posterior draws")]
    NoDraws,
    #[error("grid must be ascending within [0, {limit}]")]
    BadGrid { limit: f64 },
    #[error("credible level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error(transparent)]
    Range(#[from] RangeError),
}

/// Posterior mean and equal-tailed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
    pub level: f64,
}

/// Mean by running update (exact for identical inputs) and type-7 tails.
pub fn summarize(values: &mut [f64], level: f64) -> Interval {
    let mut mean = 0.0;
    for (k, v) in values.iter().enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    Interval {
        mean,
        low: quantile_sorted(values, tail),
        high: quantile_sorted(values, 1.0 - tail),
        level,
    }
}

fn check_level(level: f64) -> Result<(), PredictiveError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(PredictiveError::BadLevel(level))
    }
}

/// Admission probability for one patient under `state`, across draws.
pub fn patient_probability(
    draws: &[ConstrainedParams],
    x: &Covariates,
    state: EvidenceState,
    cfg: &ModelConfig,
    level: f64,
) -> Result<Interval, PredictiveError> {
    check_level(level)?;
    if draws.is_empty() {
        return Err(PredictiveError::NoDraws);
    }
    let mut p = draws
        .iter()
        .map(|d| predict_logit(state, x, d, cfg).map(logistic))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(&mut p, level))
}

/// Denominator of the cumulative curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Patients who voided.
    #[default]
    N1,
    /// All patients.
    N,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    pub grid_min: Vec<f64>,
    pub observed: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub band_low: Vec<f64>,
    pub band_high: Vec<f64>,
    pub level: f64,
    pub n1: usize,
    pub normalization: Normalization,
}

/// Integer-minute grid `0, 1, ..., floor(C)`.
pub fn default_grid(censor_limit_min: f64) -> Vec<f64> {
    (0..=censor_limit_min.floor() as usize).map(|t| t as f64).collect()
}

/// Per-draw model curves on `grid`, `[draw][grid]`.
pub fn curve_draws(
    draws: &[ConstrainedParams],
    data: &PreparedDataset,
    grid: &[f64],
    normalization: Normalization,
) -> Result<Vec<Vec<f64>>, PredictiveError> {
    let c = data.censor_limit_min;
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid.iter().any(|&t| !(0.0..=c).contains(&t)) {
        return Err(PredictiveError::BadGrid { limit: c });
    }
    if draws.is_empty() {
        return Err(PredictiveError::NoDraws);
    }
    let mut rows: Vec<_> = data.rows().filter(|r| r.voided).collect();
    if rows.is_empty() {
        return Err(PredictiveError::NoVoided);
    }
    rows.sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
    let denom = match normalization {
        Normalization::N1 => rows.len(),
        Normalization::N => data.n,
    } as f64;
    let cfg = ModelConfig::from_dataset(data);
    Ok(draws
        .par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(grid.len());
            let mut acc = 0.0;
            let mut i = 0;
            for &g in grid {
                while i < rows.len() && rows[i].t_min <= g {
                    acc += logistic(observation_logit(&rows[i], p, &cfg));
                    i += 1;
                }
                out.push(acc / denom);
            }
            out
        })
        .collect())
}

/// Observed cumulative admission proportion on `grid`.
pub fn observed_curve(data: &PreparedDataset, grid: &[f64], normalization: Normalization) -> Vec<f64> {
    let mut pts: Vec<(f64, bool)> = data
        .rows()
        .filter(|r| r.voided)
        .map(|r| (r.t_min, r.outcome))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let denom = match normalization {
        Normalization::N1 => pts.len(),
        Normalization::N => data.n,
    } as f64;
    let mut acc = 0usize;
    let mut i = 0;
    grid.iter()
        .map(|&g| {
            while i < pts.len() && pts[i].0 <= g {
                acc += usize::from(pts[i].1);
                i += 1;
            }
            acc as f64 / denom
        })
        .collect()
}

pub fn cumulative_curve(
    draws: &[ConstrainedParams],
    data: &PreparedDataset,
    grid: &[f64],
    level: f64,
    normalization: Normalization,
) -> Result<CumulativeCurve, PredictiveError> {
    check_level(level)?;
    let per_draw = curve_draws(draws, data, grid, normalization)?;
    let mut mean = Vec::with_capacity(grid.len());
    let mut low = Vec::with_capacity(grid.len());
    let mut high = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; per_draw.len()];
    for g in 0..grid.len() {
        for (c, d) in column.iter_mut().zip(&per_draw) {
            *c = d[g];
        }
        let s = summarize(&mut column, level);
        mean.push(s.mean);
        low.push(s.low);
        high.push(s.high);
    }
    Ok(CumulativeCurve {
        grid_min: grid.to_vec(),
        observed: observed_curve(data, grid, normalization),
        posterior_mean: mean,
        band_low: low,
        band_high: high,
        level,
        n1: data.n_voided(),
        normalization,
    })
}

/// Metadata written next to the curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSidecar {
    pub level: f64,
    pub n1: usize,
    pub normalization: Normalization,
    pub dataset_digest: String,
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &CumulativeCurve) -> std::io::Result<()> {
    writeln!(w, "t_min,observed,post_mean,band_low,band_high")?;
    for i in 0..curve.grid_min.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            curve.grid_min[i], curve.observed[i], curve.posterior_mean[i], curve.band_low[i], curve.band_high[i]
        )?;
    }
    Ok(())
}
