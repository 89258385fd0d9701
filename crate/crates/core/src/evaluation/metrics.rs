//! Discrimination and calibration scores for probability forecasts.

use serde::{Deserialize, Serialize};

use crate::special::{logistic, logit};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before any logit.
pub const P_CLAMP: f64 = 1e-9;
pub const MAX_NEWTON_ITER: usize = 100;
/// Convergence threshold on the norm of the mean log-likelihood gradient.
pub const NEWTON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("undefined AUC: need at least one case and one non-case")]
    UndefinedAuc,
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} predictions, {1} outcomes")]
    Length(usize, usize),
    #[error("both outcome classes are required")]
    SingleClass,
    #[error("separation: the predictor perfectly splits the outcomes")]
    Separation,
    #[error("degenerate predictor: all log-odds are equal, slope is not identifiable")]
    DegeneratePredictor,
    #[error("Newton-Raphson did not converge in {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
}

fn check(p: &[f64], y: &[bool]) -> Result<(), MetricError> {
    if p.len() != y.len() {
        return Err(MetricError::Length(p.len(), y.len()));
    }
    if p.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Mann-Whitney AUC with ties counted one half. Computed from an exact
/// integer count of doubled pair wins, so it equals the brute-force pairwise
/// count bit for bit.
pub fn auc(p: &[f64], y: &[bool]) -> Result<f64, MetricError> {
    check(p, y)?;
    let n1 = y.iter().filter(|&&v| v).count() as u64;
    let n0 = y.len() as u64 - n1;
    if n1 == 0 || n0 == 0 {
        return Err(MetricError::UndefinedAuc);
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut doubled: u64 = 0;
    let mut below0: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && p[idx[j + 1]] == p[idx[i]] {
            j += 1;
        }
        let (mut c1, mut c0) = (0u64, 0u64);
        for &k in &idx[i..=j] {
            if y[k] {
                c1 += 1;
            } else {
                c0 += 1;
            }
        }
        doubled += c1 * (2 * below0 + c0);
        below0 += c0;
        i = j + 1;
    }
    Ok(doubled as f64 / (2 * n1 * n0) as f64)
}

pub fn brier(p: &[f64], y: &[bool]) -> Result<f64, MetricError> {
    check(p, y)?;
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| (p - f64::from(u8::from(y))).powi(2))
        .sum();
    Ok(s / p.len() as f64)
}

fn ece_bin(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor() as usize).min(bins - 1)
}

/// Expected calibration error over 10 equal-width bins on `[0, 1]`.
pub fn ece10(p: &[f64], y: &[bool]) -> Result<f64, MetricError> {
    check(p, y)?;
    const BINS: usize = 10;
    let mut n = [0usize; BINS];
    let mut sp = [0.0; BINS];
    let mut sy = [0.0; BINS];
    for (&p, &y) in p.iter().zip(y) {
        let b = ece_bin(p, BINS);
        n[b] += 1;
        sp[b] += p;
        sy[b] += f64::from(u8::from(y));
    }
    let total = p.len() as f64;
    Ok((0..BINS)
        .filter(|&b| n[b] > 0)
        .map(|b| {
            let nb = n[b] as f64;
            nb / total * (sp[b] / nb - sy[b] / nb).abs()
        })
        .sum())
}

/// Clamped log-odds of each probability.
pub fn clamped_logits(p: &[f64]) -> Vec<f64> {
    p.iter().map(|&v| logit(v.clamp(P_CLAMP, 1.0 - P_CLAMP))).collect()
}

fn require_both_classes(y: &[bool]) -> Result<(), MetricError> {
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        Err(MetricError::SingleClass)
    } else {
        Ok(())
    }
}

/// Intercept of `y ~ a + offset(logit p)`.
pub fn calibration_in_the_large(p: &[f64], y: &[bool]) -> Result<f64, MetricError> {
    check(p, y)?;
    require_both_classes(y)?;
    let lp = clamped_logits(p);
    let n = lp.len() as f64;
    let mut a = 0.0;
    for _ in 0..MAX_NEWTON_ITER {
        let (mut g, mut h) = (0.0, 0.0);
        for (&l, &yv) in lp.iter().zip(y) {
            let q = logistic(a + l);
            g += f64::from(u8::from(yv)) - q;
            h += q * (1.0 - q);
        }
        if (g / n).abs() < NEWTON_TOL {
            return Ok(a);
        }
        a += g / h;
    }
    Err(MetricError::NoConvergence {
        iterations: MAX_NEWTON_ITER,
        grad_norm: f64::NAN,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    /// Calibration-in-the-large (offset model intercept).
    pub intercept_citl: f64,
    pub slope: f64,
    /// Intercept of the two-parameter fit.
    pub slope_intercept: f64,
}

fn mean_loglik(lp: &[f64], y: &[bool], a: f64, b: f64) -> f64 {
    lp.iter()
        .zip(y)
        .map(|(&l, &yv)| crate::special::bernoulli_logit(yv, a + b * l).0)
        .sum::<f64>()
        / lp.len() as f64
}

/// Two-parameter logistic fit `y ~ a + b * logit(p)` by damped Newton.
fn slope_fit(lp: &[f64], y: &[bool]) -> Result<(f64, f64), MetricError> {
    let n = lp.len() as f64;
    let (mut a, mut b) = (0.0, 1.0);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..MAX_NEWTON_ITER {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&l, &yv) in lp.iter().zip(y) {
            let q = logistic(a + b * l);
            let r = f64::from(u8::from(yv)) - q;
            let w = q * (1.0 - q);
            g0 += r;
            g1 += r * l;
            h00 += w;
            h01 += w * l;
            h11 += w * l * l;
        }
        grad_norm = (g0 * g0 + g1 * g1).sqrt() / n;
        if grad_norm < NEWTON_TOL {
            return Ok((a, b));
        }
        let det = h00 * h11 - h01 * h01;
        let da = (h11 * g0 - h01 * g1) / det;
        let db = (h00 * g1 - h01 * g0) / det;
        // halve until the likelihood does not drop beyond round-off
        let base = mean_loglik(lp, y, a, b);
        let floor = base - 1e-13 * (1.0 + base.abs());
        let mut t = 1.0;
        while t > 1e-8 && mean_loglik(lp, y, a + t * da, b + t * db) < floor {
            t *= 0.5;
        }
        a += t * da;
        b += t * db;
    }
    Err(MetricError::NoConvergence {
        iterations: MAX_NEWTON_ITER,
        grad_norm,
    })
}

/// Calibration intercept (in the large), slope and slope-model intercept.
pub fn calibration_fit(p: &[f64], y: &[bool]) -> Result<CalibrationFit, MetricError> {
    check(p, y)?;
    require_both_classes(y)?;
    let lp = clamped_logits(p);
    let first = lp[0];
    if lp.iter().all(|&l| l == first) {
        return Err(MetricError::DegeneratePredictor);
    }
    let extreme = |cls: bool| {
        lp.iter().zip(y).filter(|(_, &v)| v == cls).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), (&l, _)| (lo.min(l), hi.max(l)),
        )
    };
    let (min0, max0) = extreme(false);
    let (min1, max1) = extreme(true);
    if max0 <= min1 || max1 <= min0 {
        return Err(MetricError::Separation);
    }
    let intercept_citl = calibration_in_the_large(p, y)?;
    let (slope_intercept, slope) = slope_fit(&lp, y)?;
    Ok(CalibrationFit {
        intercept_citl,
        slope,
        slope_intercept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recalibration {
    pub alpha: f64,
    pub beta: f64,
    pub p_star: Vec<f64>,
}

/// Logistic (Platt) recalibration fitted on a training pair.
pub fn platt_recalibrate(p_train: &[f64], y_train: &[bool], p_apply: &[f64]) -> Result<Recalibration, MetricError> {
    let fit = calibration_fit(p_train, y_train)?;
    let (alpha, beta) = (fit.slope_intercept, fit.slope);
    let p_star = clamped_logits(p_apply)
        .into_iter()
        .map(|l| logistic(alpha + beta * l))
        .collect();
    Ok(Recalibration { alpha, beta, p_star })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub n: usize,
    pub mean_predicted: f64,
    pub observed_rate: f64,
}

/// Equal-frequency (decile) calibration table; group sizes differ by at most one.
pub fn decile_table(p: &[f64], y: &[bool]) -> Result<Vec<CalibrationBin>, MetricError> {
    check(p, y)?;
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let groups = 10.min(p.len());
    Ok((0..groups)
        .map(|g| {
            let lo = g * p.len() / groups;
            let hi = (g + 1) * p.len() / groups;
            let members = &idx[lo..hi];
            let n = members.len();
            CalibrationBin {
                n,
                mean_predicted: members.iter().map(|&i| p[i]).sum::<f64>() / n as f64,
                observed_rate: members.iter().filter(|&&i| y[i]).count() as f64 / n as f64,
            }
        })
        .collect())
}

/// Equal-width (ECE) calibration table over 10 bins, empty bins omitted.
pub fn equal_width_table(p: &[f64], y: &[bool]) -> Result<Vec<CalibrationBin>, MetricError> {
    check(p, y)?;
    let mut bins = vec![(0usize, 0.0, 0.0); 10];
    for (&p, &y) in p.iter().zip(y) {
        let b = &mut bins[ece_bin(p, 10)];
        b.0 += 1;
        b.1 += p;
        b.2 += f64::from(u8::from(y));
    }
    Ok(bins
        .into_iter()
        .filter(|b| b.0 > 0)
        .map(|(n, sp, sy)| CalibrationBin {
            n,
            mean_predicted: sp / n as f64,
            observed_rate: sy / n as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(p: &[f64], y: &[bool]) -> f64 {
        let mut wins = 0u64;
        let mut pairs = 0u64;
        for i in 0..p.len() {
            for j in 0..p.len() {
                if y[i] && !y[j] {
                    pairs += 1;
                    wins += if p[i] > p[j] {
                        2
                    } else if p[i] == p[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        wins as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3, 0.4], &[true, true]), Err(MetricError::UndefinedAuc));
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..60);
            let p: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            y[0] = true;
            y[1] = false;
            assert_eq!(auc(&p, &y).unwrap(), brute_auc(&p, &y));
        }
    }

    #[test]
    fn brier_examples() {
        assert!((brier(&[0.2, 0.9], &[false, true]).unwrap() - 0.025).abs() < 1e-15);
        assert_eq!(brier(&[0.5; 4], &[true, false, true, true]).unwrap(), 0.25);
        assert_eq!(brier(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece10(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap(), 0.0);
        let y: Vec<bool> = (0..20).map(|i| i < 7).collect();
        let e = ece10(&[0.55; 20], &y).unwrap();
        assert!((e - 0.2).abs() < 1e-12, "{e}");
    }

    #[test]
    fn citl_of_matching_constant_is_zero() {
        let y = [true, false, true, false];
        assert!(calibration_in_the_large(&[0.5; 4], &y).unwrap().abs() < 1e-12);
        assert_eq!(calibration_fit(&[0.5; 4], &y), Err(MetricError::DegeneratePredictor));
    }

    #[test]
    fn calibration_fit_detects_separation() {
        let p = [0.1, 0.2, 0.7, 0.9];
        let y = [false, false, true, true];
        assert_eq!(calibration_fit(&p, &y), Err(MetricError::Separation));
        assert_eq!(calibration_fit(&p, &[true; 4]), Err(MetricError::SingleClass));
    }

    #[test]
    fn calibration_of_simulated_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 100_000;
        let p: Vec<f64> = (0..n).map(|_| logistic(rng.random_range(-3.0..3.0))).collect();
        let y: Vec<bool> = p.iter().map(|&q| rng.random_bool(q)).collect();
        let fit = calibration_fit(&p, &y).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.05);
        assert!(fit.slope_intercept.abs() < 0.05);
        assert!(fit.intercept_citl.abs() < 0.05);
    }

    #[test]
    fn platt_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..500).map(|_| rng.random_range(0.02..0.98)).collect();
        let y: Vec<bool> = p.iter().map(|&q| rng.random_bool((q * 0.6 + 0.1).min(1.0))).collect();
        let r = platt_recalibrate(&p, &y, &p).unwrap();
        assert!(r.beta > 0.0);
        let again = calibration_fit(&r.p_star, &y).unwrap();
        assert!((again.slope - 1.0).abs() < 1e-6);
        assert!(again.slope_intercept.abs() < 1e-6);
        assert_eq!(auc(&r.p_star, &y).unwrap(), auc(&p, &y).unwrap());
    }

    #[test]
    fn decile_table_covers_everyone() {
        let p: Vec<f64> = (0..23).map(|i| i as f64 / 23.0).collect();
        let y: Vec<bool> = (0..23).map(|i| i % 2 == 0).collect();
        let t = decile_table(&p, &y).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(t.iter().map(|b| b.n).sum::<usize>(), 23);
        assert!(t.windows(2).all(|w| w[0].mean_predicted <= w[1].mean_predicted));
        let w = equal_width_table(&p, &y).unwrap();
        assert_eq!(w.iter().map(|b| b.n).sum::<usize>(), 23);
    }
}
