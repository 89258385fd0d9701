//! Synthetic cohorts drawn from the fitted model class, and simulation-based
//! calibration of the whole fitting pipeline.
//!
//! Cohorts are generated discriminatively: covariates, voiding and times come
//! first, then the admission outcome is drawn from the model's logit given
//! them. The fitted model is therefore correctly specified for any choice of
//! time distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::data::{prepare_dataset, DataError, PatientRecord, PreparedDataset, Sex, DEFAULT_CENSOR_LIMIT_MIN};
use crate::diagnostics::{chi_square_uniform_pvalue, RunStatus};
use crate::fit::{fit_target, param_names};
use crate::model::{
    constrain, observation_logit, ConstrainedParams, CovariateMode, ModelConfig, TtuPosterior, UnconstrainedParams,
};
use crate::sampler::{LogDensity, SamplerConfig};
use crate::special::{logistic, logit};

pub const AGE_MEAN_YEARS: f64 = 74.0;
pub const AGE_SD_YEARS: f64 = 20.0;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{failed} of {total} replications failed to fit")]
    TooManyFailures { failed: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub theta_true: ConstrainedParams,
    /// Marginal probability of an observed void.
    pub void_rate: f64,
    /// Weight of the first kernel in the voiding-time mixture.
    pub t_mixture_weight: f64,
    #[serde(default)]
    pub age_missing_rate: f64,
    #[serde(default)]
    pub sex_missing_rate: f64,
    pub seed: u64,
    #[serde(default = "default_censor")]
    pub censor_limit_min: f64,
}

fn default_censor() -> f64 {
    DEFAULT_CENSOR_LIMIT_MIN
}

/// A parameter set with well separated kernels.
pub fn separated_theta() -> ConstrainedParams {
    ConstrainedParams {
        rho0: 0.35,
        rho1: 0.7,
        mu0: 90.0,
        mu1: 200.0,
        sigma0: 30.0,
        sigma1: 40.0,
        beta: [0.5, -0.3, 0.4, 0.2],
    }
}

impl SimConfig {
    pub fn separated(n: usize, seed: u64) -> Self {
        Self {
            n,
            theta_true: separated_theta(),
            void_rate: 0.75,
            t_mixture_weight: 0.5,
            age_missing_rate: 0.05,
            sex_missing_rate: 0.05,
            seed,
            censor_limit_min: DEFAULT_CENSOR_LIMIT_MIN,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let th = &self.theta_true;
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !unit(self.void_rate) || !unit(self.t_mixture_weight) || !unit(self.age_missing_rate) || !unit(self.sex_missing_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.censor_limit_min > 0.0 && self.censor_limit_min.is_finite()) {
            return bad("censor_limit_min must be positive");
        }
        if !(th.rho0 > 0.0 && th.rho0 < 1.0 && th.rho1 > 0.0 && th.rho1 < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(th.sigma0 > 0.0 && th.sigma1 > 0.0) {
            return bad("sigma must be positive");
        }
        if !(0.0..=self.censor_limit_min).contains(&th.mu0) || !(th.mu0..=self.censor_limit_min).contains(&th.mu1) {
            return bad("need 0 <= mu0 <= mu1 <= censor limit");
        }
        if th.beta.iter().any(|b| !b.is_finite()) {
            return bad("beta must be finite");
        }
        Ok(())
    }
}

/// Draws from `N(mean, sd)` restricted to `[lower, upper]`: rejection first,
/// inverse CDF when the window carries little mass.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lower: f64, upper: f64) -> f64 {
    let normal = Normal::new(mean, sd).expect("positive sd");
    for _ in 0..MAX_REJECTIONS {
        let x = normal.sample(rng);
        if (lower..=upper).contains(&x) {
            return x;
        }
    }
    let n = StatNormal::new(mean, sd).expect("positive sd");
    let (a, b) = (n.cdf(lower), n.cdf(upper));
    n.inverse_cdf(a + (b - a) * rng.random::<f64>()).clamp(lower, upper)
}

/// Covariates, voiding indicator and voiding times with outcomes unset.
pub fn generate_design<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Vec<PatientRecord> {
    let th = &cfg.theta_true;
    (0..cfg.n)
        .map(|i| {
            let age = truncated_normal(rng, AGE_MEAN_YEARS, AGE_SD_YEARS, 0.0, f64::INFINITY);
            let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
            let age_years = (!rng.random_bool(cfg.age_missing_rate)).then_some(age);
            let sex = (!rng.random_bool(cfg.sex_missing_rate)).then_some(sex);
            let voided = rng.random_bool(cfg.void_rate);
            let ttu_raw_min = voided.then(|| {
                let (mu, sd) = if rng.random_bool(cfg.t_mixture_weight) {
                    (th.mu0, th.sigma0)
                } else {
                    (th.mu1, th.sigma1)
                };
                truncated_normal(rng, mu, sd, 0.0, f64::INFINITY)
            });
            PatientRecord {
                id: format!("sim{i:06}"),
                ttu_raw_min,
                voided,
                age_years,
                sex,
                admitted: false,
                catheter_at_presentation: false,
                cpa_on_arrival: false,
            }
        })
        .collect()
}

/// Draws each outcome from the model logit under `theta` and returns the
/// prepared dataset together with the completed records.
pub fn draw_outcomes<R: Rng + ?Sized>(
    mut records: Vec<PatientRecord>,
    theta: &ConstrainedParams,
    censor_limit_min: f64,
    rng: &mut R,
) -> Result<(Vec<PatientRecord>, PreparedDataset), SimError> {
    let mut data = prepare_dataset(&records, censor_limit_min)?;
    let cfg = ModelConfig::from_dataset(&data);
    for (i, r) in records.iter_mut().enumerate() {
        let p = logistic(observation_logit(&data.row(i), theta, &cfg));
        r.admitted = rng.random::<f64>() < p;
        data.outcome[i] = r.admitted;
    }
    Ok((records, data))
}

/// A full synthetic cohort. Same config, same cohort.
pub fn generate_cohort(cfg: &SimConfig) -> Result<Vec<PatientRecord>, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let design = generate_design(cfg, &mut rng);
    Ok(draw_outcomes(design, &cfg.theta_true, cfg.censor_limit_min, &mut rng)?.0)
}

/// One draw from the prior, on the sampler's coordinates.
pub fn sample_prior<R: Rng + ?Sized>(cfg: &ModelConfig, mode: CovariateMode, rng: &mut R) -> UnconstrainedParams {
    let s = cfg.prior_scale;
    let c = cfg.censor_limit_min;
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    let eta0 = z();
    let eta1 = z();
    let ls0 = s.ln() + z();
    let ls1 = s.ln() + z();
    let half = (s * z()).abs();
    let mut beta = [z(), z(), z(), z()];
    if mode == CovariateMode::None {
        beta = [0.0; 4];
    }
    let mu0 = truncated_normal(rng, cfg.prior_t_mean, 2.0 * s, 0.0, c);
    UnconstrainedParams {
        eta0,
        eta1,
        mu0_raw: logit((mu0 / c).clamp(1e-12, 1.0 - 1e-12)),
        delta_mu_raw: half.max(f64::MIN_POSITIVE).ln(),
        log_sigma0: ls0,
        log_sigma1: ls1,
        beta_age: beta[0],
        beta_age_mis: beta[1],
        beta_sex: beta[2],
        beta_sex_mis: beta[3],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcConfig {
    pub replications: usize,
    pub n_per_fit: usize,
    pub sampler: SamplerConfig,
    pub mode: CovariateMode,
    /// Posterior draws kept per replication; ranks take values `0..=n_ranks`.
    pub n_ranks: usize,
    pub bins: usize,
    pub seed: u64,
}

impl SbcConfig {
    pub fn new(replications: usize, n_per_fit: usize, seed: u64) -> Self {
        Self {
            replications,
            n_per_fit,
            sampler: SamplerConfig {
                chains: 2,
                warmup: 300,
                draws: 300,
                max_treedepth: 8,
                seed,
                ..SamplerConfig::default()
            },
            mode: CovariateMode::AgeSex,
            n_ranks: 99,
            bins: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcReport {
    pub replications: usize,
    pub failures: usize,
    /// Replications whose diagnostics were FAILED; their ranks are kept.
    pub flagged: usize,
    pub param_names: Vec<String>,
    /// `ranks[k][r]`: rank of the true value of parameter `k` in replication `r`.
    pub ranks: Vec<Vec<usize>>,
    pub histograms: Vec<Vec<usize>>,
    pub p_values: Vec<Option<f64>>,
    pub n_ranks: usize,
    pub warnings: Vec<String>,
}

impl SbcReport {
    pub fn min_p_value(&self) -> Option<f64> {
        self.p_values.iter().flatten().copied().reduce(f64::min)
    }
}

struct Replication {
    ranks: Vec<usize>,
    flagged: bool,
}

/// Design for SBC replications: times from a fixed mixture, independent of
/// the parameter draw, so that the data-dependent prior is fixed before
/// the parameters are drawn.
fn sbc_design<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<PatientRecord> {
    let mut cfg = SimConfig::separated(n, 0);
    cfg.theta_true.beta = [0.0; 4];
    generate_design(&cfg, rng)
}

fn replicate<T, F>(cfg: &SbcConfig, r: usize, make_target: &F) -> Option<Replication>
where
    T: LogDensity,
    F: Fn(TtuPosterior) -> T + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(r as u64);
    let design = sbc_design(cfg.n_per_fit, &mut rng);
    let pre = prepare_dataset(&design, DEFAULT_CENSOR_LIMIT_MIN).ok()?;
    let model_cfg = ModelConfig::from_dataset(&pre);
    let u_true = sample_prior(&model_cfg, cfg.mode, &mut rng);
    let theta = constrain(&u_true, &model_cfg);
    let (_, data) = draw_outcomes(design, &theta, DEFAULT_CENSOR_LIMIT_MIN, &mut rng).ok()?;
    let target = make_target(TtuPosterior::new(&data, model_cfg, cfg.mode));
    let sampler = SamplerConfig {
        seed: rng.random(),
        ..cfg.sampler
    };
    let out = fit_target(&target, model_cfg, cfg.mode, &sampler).ok()?;
    let all: Vec<&[f64]> = out.draws.iter_draws().collect();
    let stride = (all.len() / cfg.n_ranks).max(1);
    let kept: Vec<&[f64]> = all.iter().step_by(stride).take(cfg.n_ranks).copied().collect();
    let truth = u_true.to_array();
    // sampled coordinates are a prefix of the full vector
    let ranks = (0..cfg.mode.sampled_dim())
        .map(|k| kept.iter().filter(|d| d[k] < truth[k]).count())
        .collect();
    Some(Replication {
        ranks,
        flagged: out.report.status == RunStatus::Failed,
    })
}

/// Simulation-based calibration of the fitting pipeline on the model target.
pub fn sbc_run(cfg: &SbcConfig) -> Result<SbcReport, SimError> {
    sbc_run_with(cfg, |p| p)
}

/// As [`sbc_run`], with the posterior wrapped by `make_target` before
/// sampling (used to check that a corrupted target is detected).
pub fn sbc_run_with<T, F>(cfg: &SbcConfig, make_target: F) -> Result<SbcReport, SimError>
where
    T: LogDensity,
    F: Fn(TtuPosterior) -> T + Sync,
{
    if cfg.n_ranks == 0 || cfg.bins == 0 || (cfg.n_ranks + 1) % cfg.bins != 0 {
        return Err(SimError::Config("bins must divide n_ranks + 1".into()));
    }
    cfg.sampler
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    if cfg.sampler.chains * cfg.sampler.draws < cfg.n_ranks {
        return Err(SimError::Config("fewer posterior draws than n_ranks".into()));
    }
    let reps: Vec<Option<Replication>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| replicate(cfg, r, &make_target))
        .collect();
    let failures = reps.iter().filter(|r| r.is_none()).count();
    if failures * 10 > cfg.replications {
        return Err(SimError::TooManyFailures {
            failed: failures,
            total: cfg.replications,
        });
    }
    let ok: Vec<Replication> = reps.into_iter().flatten().collect();
    let dim = cfg.mode.sampled_dim();
    let ranks: Vec<Vec<usize>> = (0..dim).map(|k| ok.iter().map(|r| r.ranks[k]).collect()).collect();
    let width = (cfg.n_ranks + 1) / cfg.bins;
    let histograms: Vec<Vec<usize>> = ranks
        .iter()
        .map(|rs| {
            let mut h = vec![0; cfg.bins];
            for &r in rs {
                h[r / width] += 1;
            }
            h
        })
        .collect();
    let mut warnings = Vec::new();
    if ok.len() < 50 {
        warnings.push(format!("only {} replications; uniformity tests have little power", ok.len()));
    }
    let testable = ok.len() >= cfg.bins;
    if !testable {
        warnings.push("too few replications for a uniformity test".to_string());
    }
    let p_values = histograms
        .iter()
        .map(|h| testable.then(|| chi_square_uniform_pvalue(h)))
        .collect();
    let names = param_names();
    Ok(SbcReport {
        replications: cfg.replications,
        failures,
        flagged: ok.iter().filter(|r| r.flagged).count(),
        param_names: names[..dim].to_vec(),
        ranks,
        histograms,
        p_values,
        n_ranks: cfg.n_ranks,
        warnings,
    })
}
