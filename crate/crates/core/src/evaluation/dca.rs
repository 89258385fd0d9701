//! Decision-curve analysis with paired bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;

pub const DEFAULT_BOOTSTRAP: usize = 2000;

/// Thresholds 0.10, 0.11, ..., 0.60.
pub fn default_thresholds() -> Vec<f64> {
    (10..=60).map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCurve {
    pub thresholds: Vec<f64>,
    pub prevalence: f64,
    pub nb_model: Vec<f64>,
    pub nb_admit_all: Vec<f64>,
    pub nb_admit_none: Vec<f64>,
    /// Present when a baseline predictor was supplied.
    pub delta_nb: Option<Vec<f64>>,
    pub delta_ci_low: Option<Vec<f64>>,
    pub delta_ci_high: Option<Vec<f64>>,
    pub bootstrap: usize,
}

/// Net benefit `TP/N - FP/N * t/(1-t)`, positive when `p >= t`, with
/// per-patient integer weights (bootstrap multiplicities).
fn net_benefit_weighted(p: &[f64], y: &[bool], w: &[u32], n: f64, t: f64) -> f64 {
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in 0..p.len() {
        if p[i] >= t {
            if y[i] {
                tp += u64::from(w[i]);
            } else {
                fp += u64::from(w[i]);
            }
        }
    }
    tp as f64 / n - fp as f64 / n * t / (1.0 - t)
}

pub fn net_benefit(p: &[f64], y: &[bool], t: f64) -> f64 {
    let w = vec![1; p.len()];
    net_benefit_weighted(p, y, &w, p.len() as f64, t)
}

pub fn net_benefit_admit_all(prevalence: f64, t: f64) -> f64 {
    prevalence - (1.0 - prevalence) * t / (1.0 - t)
}

pub fn decision_curve(
    p: &[f64],
    y: &[bool],
    thresholds: &[f64],
    baseline: Option<&[f64]>,
    bootstrap: usize,
    seed: u64,
) -> DecisionCurve {
    assert_eq!(p.len(), y.len());
    let n = p.len();
    let prevalence = y.iter().filter(|&&v| v).count() as f64 / n as f64;
    let nb_model: Vec<f64> = thresholds.iter().map(|&t| net_benefit(p, y, t)).collect();
    let (delta_nb, delta_ci_low, delta_ci_high) = match baseline {
        None => (None, None, None),
        Some(base) => {
            assert_eq!(base.len(), n);
            let delta: Vec<f64> = thresholds
                .iter()
                .zip(&nb_model)
                .map(|(&t, m)| m - net_benefit(base, y, t))
                .collect();
            // [resample][threshold]
            let boots: Vec<Vec<f64>> = (0..bootstrap)
                .into_par_iter()
                .map(|b| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(b as u64);
                    let mut w = vec![0u32; n];
                    for _ in 0..n {
                        w[rng.random_range(0..n)] += 1;
                    }
                    thresholds
                        .iter()
                        .map(|&t| {
                            net_benefit_weighted(p, y, &w, n as f64, t)
                                - net_benefit_weighted(base, y, &w, n as f64, t)
                        })
                        .collect()
                })
                .collect();
            let (mut lo, mut hi) = (Vec::new(), Vec::new());
            for k in 0..thresholds.len() {
                let mut col: Vec<f64> = boots.iter().map(|r| r[k]).collect();
                col.sort_by(|a, b| a.total_cmp(b));
                if col.is_empty() {
                    lo.push(f64::NAN);
                    hi.push(f64::NAN);
                } else {
                    lo.push(quantile_sorted(&col, 0.025));
                    hi.push(quantile_sorted(&col, 0.975));
                }
            }
            (Some(delta), Some(lo), Some(hi))
        }
    };
    DecisionCurve {
        thresholds: thresholds.to_vec(),
        prevalence,
        nb_model,
        nb_admit_all: thresholds.iter().map(|&t| net_benefit_admit_all(prevalence, t)).collect(),
        nb_admit_none: vec![0.0; thresholds.len()],
        delta_nb,
        delta_ci_low,
        delta_ci_high,
        bootstrap: if baseline.is_some() { bootstrap } else { 0 },
    }
}
