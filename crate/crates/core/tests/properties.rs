//! Property tests over randomly generated cohorts, parameters and scores.

use proptest::prelude::*;

use ttu_core::data::{prepare_dataset, read_records, write_records, PatientRecord, Sex};
use ttu_core::evaluation::dca::{default_thresholds, net_benefit, net_benefit_admit_all};
use ttu_core::evaluation::gof::gof_metrics;
use ttu_core::evaluation::metrics::{auc, brier, calibration_fit, platt_recalibrate};
use ttu_core::model::{
    constrain, log_posterior_with_grad, mu1_clamp_active, observation_logit, ConstrainedParams, ModelConfig, UnconstrainedParams,
    N_PARAMS,
};
use ttu_core::predictive::{cumulative_curve, curve_draws, default_grid, observed_curve, Normalization};
use ttu_core::special::logit;

fn record() -> impl Strategy<Value = PatientRecord> {
    (
        prop::option::of(0.0..600.0f64),
        prop::option::of(0.0..105.0f64),
        prop::option::of(prop::bool::ANY),
        prop::bool::ANY,
    )
        .prop_map(|(t, age, sex, admitted)| {
            let voided = t.is_some();
            PatientRecord {
                id: String::new(),
                ttu_raw_min: t,
                voided,
                age_years: age,
                sex: sex.map(|m| if m { Sex::Male } else { Sex::Female }),
                admitted,
                catheter_at_presentation: false,
                cpa_on_arrival: false,
            }
        })
}

fn cohort(max: usize) -> impl Strategy<Value = Vec<PatientRecord>> {
    prop::collection::vec(record(), 1..max).prop_map(|mut v| {
        for (i, r) in v.iter_mut().enumerate() {
            r.id = format!("r{i}");
        }
        v
    })
}

fn theta() -> impl Strategy<Value = ConstrainedParams> {
    (
        0.02..0.98f64,
        0.02..0.98f64,
        5.0..250.0f64,
        0.0..120.0f64,
        5.0..90.0f64,
        5.0..90.0f64,
        prop::array::uniform4(-2.0..2.0f64),
    )
        .prop_map(|(rho0, rho1, mu0, dmu, sigma0, sigma1, beta)| ConstrainedParams {
            rho0,
            rho1,
            mu0,
            mu1: (mu0 + dmu).min(300.0),
            sigma0,
            sigma1,
            beta,
        })
}

fn scored(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0.001..0.999f64, prop::bool::ANY), 2..max).prop_map(|v| {
        let (mut p, mut y): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
        y[0] = true;
        y[1] = false;
        p[0] = p[0].max(0.5);
        p[1] = p[1].min(0.5);
        (p, y)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_reexport_is_idempotent(recs in cohort(40)) {
        let a = prepare_dataset(&recs, 300.0).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        let b = prepare_dataset(&back, 300.0).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn raising_the_limit_never_shortens_times(recs in cohort(40), c1 in 10.0..400.0f64, extra in 0.0..300.0f64) {
        let lo = prepare_dataset(&recs, c1).unwrap();
        let hi = prepare_dataset(&recs, c1 + extra).unwrap();
        for i in 0..lo.n {
            prop_assert!(hi.t_min[i] >= lo.t_min[i]);
        }
        let count = |d: &ttu_core::data::PreparedDataset| d.censored.iter().filter(|&&c| c).count();
        prop_assert!(count(&hi) <= count(&lo));
    }

    #[test]
    fn age_standardization_round_trips(recs in cohort(40)) {
        let d = prepare_dataset(&recs, 300.0).unwrap();
        for (i, r) in recs.iter().enumerate() {
            if let Some(age) = r.age_years {
                prop_assert!((d.age_std[i] * d.age_sd + d.age_mean - age).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constrained_means_are_ordered(v in prop::array::uniform10(-30.0..30.0f64), c in 50.0..600.0f64) {
        let cfg = ModelConfig { censor_limit_min: c, epsilon: 1e-6, prior_t_mean: c / 2.0, prior_scale: c / 5.0 };
        let p = constrain(&UnconstrainedParams::from_slice(&v), &cfg);
        prop_assert!(p.mu0 <= p.mu1 && p.mu1 <= c);
        prop_assert!(p.rho0 > 0.0 && p.rho0 < 1.0 && p.sigma0 > 0.0 && p.sigma1 > 0.0);
    }

    #[test]
    fn shared_kernels_leave_only_the_linear_term(recs in cohort(30), th in theta()) {
        let d = prepare_dataset(&recs, 300.0).unwrap();
        let cfg = ModelConfig::from_dataset(&d);
        let p = ConstrainedParams { rho1: th.rho0, mu1: th.mu0, sigma1: th.sigma0, ..th };
        for row in d.rows().filter(|r| r.voided) {
            prop_assert_eq!(observation_logit(&row, &p, &cfg), p.linear_term(&row.covariates));
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms((p, y) in scored(80), a in 0.1..5.0f64, b in -3.0..3.0f64) {
        let base = auc(&p, &y).unwrap();
        let lg: Vec<f64> = p.iter().map(|&v| logit(v)).collect();
        let aff: Vec<f64> = p.iter().map(|&v| a * v + b).collect();
        prop_assert_eq!(auc(&lg, &y).unwrap(), base);
        prop_assert_eq!(auc(&aff, &y).unwrap(), base);
    }

    #[test]
    fn brier_of_the_prevalence_predictor((_, y) in scored(80)) {
        let pi = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
        let b = brier(&vec![pi; y.len()], &y).unwrap();
        prop_assert!((b - pi * (1.0 - pi)).abs() < 1e-15);
        prop_assert!(b <= 0.25 + (pi - 0.5).abs());
    }

    #[test]
    fn net_benefit_never_beats_prevalence((p, y) in scored(80)) {
        let pi = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
        for t in default_thresholds() {
            prop_assert!(net_benefit(&p, &y, t) <= pi + 1e-15);
            let constant = net_benefit(&vec![pi; y.len()], &y, t);
            let want = if pi >= t { net_benefit_admit_all(pi, t) } else { 0.0 };
            prop_assert!((constant - want).abs() < 1e-14);
        }
    }

    #[test]
    fn recalibration_is_idempotent((p, y) in scored(200)) {
        // separation or a degenerate predictor leave recalibration undefined
        if let Ok(first) = platt_recalibrate(&p, &y, &p) {
            if let Ok(second) = platt_recalibrate(&first.p_star, &y, &first.p_star) {
                prop_assert!(second.alpha.abs() < 1e-6, "alpha {}", second.alpha);
                prop_assert!((second.beta - 1.0).abs() < 1e-6, "beta {}", second.beta);
                let fit = calibration_fit(&first.p_star, &y).unwrap();
                prop_assert!((fit.slope - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn curves_are_monotone_bounded_and_nested(recs in cohort(40), draws in prop::collection::vec(theta(), 1..30)) {
        let d = prepare_dataset(&recs, 300.0).unwrap();
        prop_assume!(d.n_voided() > 0);
        let grid = default_grid(300.0);
        let n1 = d.n_voided() as f64;
        let per_draw = curve_draws(&draws, &d, &grid, Normalization::N1).unwrap();
        for c in per_draw.iter().chain(std::iter::once(&observed_curve(&d, &grid, Normalization::N1))) {
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let y1 = d.rows().filter(|r| r.voided && r.outcome).count() as f64;
        let obs = observed_curve(&d, &grid, Normalization::N1);
        prop_assert!(obs.iter().all(|&v| v <= y1 / n1 + 1e-15));
        let wide = cumulative_curve(&draws, &d, &grid, 0.95, Normalization::N1).unwrap();
        let narrow = cumulative_curve(&draws, &d, &grid, 0.50, Normalization::N1).unwrap();
        for g in 0..grid.len() {
            prop_assert!(wide.band_low[g] <= narrow.band_low[g] && narrow.band_high[g] <= wide.band_high[g]);
        }
    }

    #[test]
    fn matching_curves_have_zero_error(vals in prop::collection::vec(0.0..1.0f64, 301)) {
        let grid = default_grid(300.0);
        let curve = ttu_core::predictive::CumulativeCurve {
            grid_min: grid,
            observed: vals.clone(),
            posterior_mean: vals.clone(),
            band_low: vals.clone(),
            band_high: vals,
            level: 0.95,
            n1: 1,
            normalization: Normalization::N1,
        };
        let g = gof_metrics(&curve, 300.0).unwrap();
        prop_assert_eq!([g.ise, g.rmse_time, g.ks, g.cvm, g.abc, g.iae], [0.0; 6]);
        prop_assert_eq!(g.coverage, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gradient_matches_finite_differences(recs in cohort(30), offsets in prop::array::uniform10(-2.0..2.0f64)) {
        let d = prepare_dataset(&recs, 300.0).unwrap();
        let cfg = ModelConfig::from_dataset(&d);
        let ls = cfg.prior_scale.ln();
        let center = [0.0, 0.0, 0.0, ls, ls, ls, 0.0, 0.0, 0.0, 0.0];
        let v: Vec<f64> = center.iter().zip(offsets).map(|(c, o)| c + o).collect();
        let f = |v: &[f64]| log_posterior_with_grad(&UnconstrainedParams::from_slice(v), &d, &cfg);
        let (lp, g) = f(&v);
        for k in 0..N_PARAMS {
            let fd4 = |h: f64| {
                let at = |d: f64| {
                    let mut w = v.clone();
                    w[k] += d;
                    f(&w).0
                };
                (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
            };
            let h = 1e-4 * v[k].abs().max(1.0);
            let clamped = |d: f64| {
                let mut w = v.clone();
                w[k] += d;
                mu1_clamp_active(&UnconstrainedParams::from_slice(&w), &cfg)
            };
            if clamped(-2.0 * h) != clamped(2.0 * h) {
                // the stencil straddles the kink where mu1 meets the limit
                continue;
            }
            let (coarse, fine) = (fd4(h), fd4(h / 2.0));
            // far-tail points have extreme curvature or large |lp|; the oracle's
            // own truncation and round-off errors are estimated and allowed for
            let oracle_err = (coarse - fine).abs() + 8.0 * f64::EPSILON * lp.abs() / h;
            let tol = 1e-6 * g[k].abs().max(fine.abs()).max(1.0) + oracle_err;
            prop_assert!((g[k] - fine).abs() < tol, "coord {} analytic {} fd {} lp {}", k, g[k], fine, lp);
        }
    }
}
