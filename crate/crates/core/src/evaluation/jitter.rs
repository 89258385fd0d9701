//! Robustness of landmark metrics to measurement error in the recorded
//! voiding times. The fitted posterior is reused; only the data are perturbed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreparedDataset;
use crate::evaluation::landmark::{landmark_report, LandmarkMetrics};
use crate::model::{ConstrainedParams, ModelConfig, RangeError};

pub const DEFAULT_DELTAS_MIN: [f64; 2] = [5.0, 10.0];
/// Landmarks at which the calibration columns are reported.
pub const CALIBRATION_LANDMARKS_MIN: [f64; 2] = [120.0, 300.0];

/// Perturbs every recorded raw time by `Uniform(-delta, delta)`, floors at 0
/// and re-applies censoring. `delta == 0` returns an exact copy and consumes
/// no randomness.
pub fn jitter_dataset<R: Rng + ?Sized>(data: &PreparedDataset, delta: f64, rng: &mut R) -> PreparedDataset {
    let mut out = data.clone();
    if delta == 0.0 {
        return out;
    }
    let c = data.censor_limit_min;
    for i in 0..out.n {
        if let Some(raw) = out.t_raw_min[i] {
            let t = (raw + rng.random_range(-delta..=delta)).max(0.0);
            out.t_raw_min[i] = Some(t);
            out.t_min[i] = t.min(c);
            out.censored[i] = t > c;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterRow {
    pub delta_min: f64,
    pub landmarks_min: Vec<f64>,
    pub auc: Vec<Option<f64>>,
    pub brier: Vec<f64>,
    /// `(landmark, intercept, slope)` from the two-parameter recalibration fit.
    pub calibration: Vec<(f64, Option<f64>, Option<f64>)>,
}

impl JitterRow {
    fn from_metrics(delta_min: f64, m: &[LandmarkMetrics]) -> Self {
        Self {
            delta_min,
            landmarks_min: m.iter().map(|r| r.t_min).collect(),
            auc: m.iter().map(|r| r.auc).collect(),
            brier: m.iter().map(|r| r.brier).collect(),
            calibration: m
                .iter()
                .filter(|r| CALIBRATION_LANDMARKS_MIN.contains(&r.t_min))
                .map(|r| (r.t_min, r.cal_slope_intercept, r.cal_slope))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterTable {
    pub seed: u64,
    /// Unperturbed data first, then one row per requested delta.
    pub rows: Vec<JitterRow>,
}

pub fn jitter_robustness(
    draws: &[ConstrainedParams],
    data: &PreparedDataset,
    cfg: &ModelConfig,
    landmarks: &[f64],
    deltas: &[f64],
    seed: u64,
) -> Result<JitterTable, RangeError> {
    let base = landmark_report(draws, data, cfg, landmarks)?;
    let mut rows = vec![JitterRow::from_metrics(0.0, &base.landmarks)];
    for (k, &delta) in deltas.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let jittered = jitter_dataset(data, delta, &mut rng);
        let rep = landmark_report(draws, &jittered, cfg, landmarks)?;
        rows.push(JitterRow::from_metrics(delta, &rep.landmarks));
    }
    Ok(JitterTable { seed, rows })
}
