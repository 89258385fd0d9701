//! Landmark predictions: each patient scored with the evidence available at a
//! fixed elapsed time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, PreparedDataset, PreparedRow};
use crate::evaluation::metrics::{auc, brier, calibration_fit, ece10, CalibrationFit};
use crate::model::{predict_logit, ConstrainedParams, EvidenceState, ModelConfig, RangeError};
use crate::special::logistic;

pub const LANDMARKS_MIN: [f64; 5] = [60.0, 120.0, 180.0, 240.0, 300.0];

/// Evidence state of a patient at elapsed time `t`.
pub fn evidence_state(row: &PreparedRow, t: f64, censor_limit_min: f64) -> EvidenceState {
    if row.voided {
        if !row.censored && row.t_min <= t {
            EvidenceState::VoidedAt { t_min: row.t_min }
        } else if row.censored && t >= censor_limit_min {
            EvidenceState::VoidedCensored
        } else {
            EvidenceState::NotYet { t_min: t }
        }
    } else if t < censor_limit_min {
        EvidenceState::NotYet { t_min: t }
    } else {
        EvidenceState::NotObserved
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkProbabilities {
    pub t_min: f64,
    pub p_hat: Vec<f64>,
    pub y: Vec<bool>,
    pub states: Vec<EvidenceState>,
}

/// Posterior-mean admission probability of every patient at landmark `t`.
pub fn landmark_probabilities(
    draws: &[ConstrainedParams],
    data: &PreparedDataset,
    cfg: &ModelConfig,
    t: f64,
) -> Result<LandmarkProbabilities, RangeError> {
    let c = cfg.censor_limit_min;
    if !(0.0..=c).contains(&t) {
        return Err(RangeError::Time { t, limit: c });
    }
    let states: Vec<EvidenceState> = data.rows().map(|r| evidence_state(&r, t, c)).collect();
    let zero = Covariates::default();
    // The state-dependent part of the logit is shared by every patient with
    // the same state; only voided_at depends on the patient's own time.
    let shared: Vec<[f64; 3]> = draws
        .iter()
        .map(|d| {
            Ok([
                predict_logit(EvidenceState::NotYet { t_min: t }, &zero, d, cfg)?,
                predict_logit(EvidenceState::NotObserved, &zero, d, cfg)?,
                predict_logit(EvidenceState::VoidedCensored, &zero, d, cfg)?,
            ])
        })
        .collect::<Result<_, RangeError>>()?;
    let p_hat = (0..data.n)
        .into_par_iter()
        .map(|i| {
            let x = data.covariates(i);
            let state = states[i];
            let mut mean = 0.0;
            for (k, (d, base)) in draws.iter().zip(&shared).enumerate() {
                let logit = match state {
                    EvidenceState::NotYet { .. } => base[0] + d.linear_term(&x),
                    EvidenceState::NotObserved => base[1] + d.linear_term(&x),
                    EvidenceState::VoidedCensored => base[2] + d.linear_term(&x),
                    EvidenceState::VoidedAt { .. } => predict_logit(state, &x, d, cfg)?,
                };
                mean += (logistic(logit) - mean) / (k + 1) as f64;
            }
            Ok(mean)
        })
        .collect::<Result<Vec<_>, RangeError>>()?;
    Ok(LandmarkProbabilities {
        t_min: t,
        p_hat,
        y: data.outcome.clone(),
        states,
    })
}

/// Scores at one landmark. Metrics that are undefined on the sample (single
/// class, separation) are reported as `None` with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMetrics {
    pub t_min: f64,
    pub n_t: usize,
    pub auc: Option<f64>,
    pub brier: f64,
    pub ece10: f64,
    pub cal_intercept: Option<f64>,
    pub cal_slope: Option<f64>,
    pub cal_slope_intercept: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

pub fn score_landmark(lp: &LandmarkProbabilities) -> LandmarkMetrics {
    let mut notes = Vec::new();
    let auc = auc(&lp.p_hat, &lp.y).map_err(|e| notes.push(e.to_string())).ok();
    let cal: Option<CalibrationFit> = calibration_fit(&lp.p_hat, &lp.y)
        .map_err(|e| notes.push(e.to_string()))
        .ok();
    LandmarkMetrics {
        t_min: lp.t_min,
        n_t: lp.p_hat.len(),
        auc,
        brier: brier(&lp.p_hat, &lp.y).expect("nonempty, aligned"),
        ece10: ece10(&lp.p_hat, &lp.y).expect("nonempty, aligned"),
        cal_intercept: cal.map(|c| c.intercept_citl),
        cal_slope: cal.map(|c| c.slope),
        cal_slope_intercept: cal.map(|c| c.slope_intercept),
        notes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkReport {
    pub landmarks: Vec<LandmarkMetrics>,
}

pub fn landmark_report(
    draws: &[ConstrainedParams],
    data: &PreparedDataset,
    cfg: &ModelConfig,
    landmarks: &[f64],
) -> Result<LandmarkReport, RangeError> {
    let landmarks = landmarks
        .iter()
        .map(|&t| landmark_probabilities(draws, data, cfg, t).map(|lp| score_landmark(&lp)))
        .collect::<Result<_, _>>()?;
    Ok(LandmarkReport { landmarks })
}
