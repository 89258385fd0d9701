//! Scoring of a fitted model: curve goodness of fit, landmark discrimination
//! and calibration, recalibration, decision curves and jitter robustness.

pub mod dca;
pub mod gof;
pub mod jitter;
pub mod landmark;
pub mod metrics;

pub use dca::{decision_curve, default_thresholds, DecisionCurve};
pub use gof::{gof_metrics, GofError, GofReport};
pub use jitter::{jitter_dataset, jitter_robustness, JitterTable};
pub use landmark::{evidence_state, landmark_probabilities, landmark_report, LandmarkReport, LANDMARKS_MIN};
pub use metrics::{auc, brier, calibration_fit, ece10, platt_recalibrate, MetricError};
