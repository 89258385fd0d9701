//! Log-posterior of the two-kernel TTU admission model.
//!
//! Patients who void contribute the log ratio of two normal kernels at their
//! (right-censored) void time, patients who never void contribute the ratio of
//! the non-void propensities. Outcomes are Bernoulli on the resulting
//! log-odds. Sampling happens on an unbounded space; every constrained
//! quantity is reached through a smooth transform whose log-Jacobian is part
//! of the target.

use serde::{Deserialize, Serialize};

use crate::data::{Covariates, PreparedDataset, PreparedRow};
use crate::sampler::LogDensity;
use crate::special::{
    bernoulli_logit, inv_mills, log_normal_pdf, log_sf, logistic, logit, sf, softplus, LN_SQRT_2PI,
};

pub const N_PARAMS: usize = 10;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "eta0",
    "eta1",
    "mu0_raw",
    "delta_mu_raw",
    "log_sigma0",
    "log_sigma1",
    "beta_age",
    "beta_age_mis",
    "beta_sex",
    "beta_sex_mis",
];

/// Number of non-covariate coordinates.
pub const N_KERNEL_PARAMS: usize = 6;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RangeError {
    #[error("time {t} outside [0, {limit}]")]
    Time { t: f64, limit: f64 },
}

/// Sampler coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UnconstrainedParams {
    pub eta0: f64,
    pub eta1: f64,
    pub mu0_raw: f64,
    pub delta_mu_raw: f64,
    pub log_sigma0: f64,
    pub log_sigma1: f64,
    pub beta_age: f64,
    pub beta_age_mis: f64,
    pub beta_sex: f64,
    pub beta_sex_mis: f64,
}

impl UnconstrainedParams {
    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), N_PARAMS);
        Self {
            eta0: v[0],
            eta1: v[1],
            mu0_raw: v[2],
            delta_mu_raw: v[3],
            log_sigma0: v[4],
            log_sigma1: v[5],
            beta_age: v[6],
            beta_age_mis: v[7],
            beta_sex: v[8],
            beta_sex_mis: v[9],
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.eta0,
            self.eta1,
            self.mu0_raw,
            self.delta_mu_raw,
            self.log_sigma0,
            self.log_sigma1,
            self.beta_age,
            self.beta_age_mis,
            self.beta_sex,
            self.beta_sex_mis,
        ]
    }

    pub fn beta(&self) -> [f64; 4] {
        [self.beta_age, self.beta_age_mis, self.beta_sex, self.beta_sex_mis]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Model-scale parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedParams {
    pub rho0: f64,
    pub rho1: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    /// Coefficients of `(age, age_mis, sex, sex_mis)`.
    pub beta: [f64; 4],
}

impl ConstrainedParams {
    #[inline]
    pub fn linear_term(&self, x: &Covariates) -> f64 {
        let d = x.design();
        self.beta.iter().zip(d).map(|(b, x)| b * x).sum()
    }

    /// Fully symmetric parameters: equal propensities and kernels, no
    /// covariate effect. Every prediction is exactly 0.5.
    pub fn symmetric(rho: f64, mu: f64, sigma: f64) -> Self {
        Self {
            rho0: rho,
            rho1: rho,
            mu0: mu,
            mu1: mu,
            sigma0: sigma,
            sigma1: sigma,
            beta: [0.0; 4],
        }
    }

    /// Inverse of [`constrain`] (ignoring the clamps). Requires
    /// `0 < mu0 <= mu1 < C` and `sigma_k > epsilon`.
    pub fn to_unconstrained(&self, cfg: &ModelConfig) -> UnconstrainedParams {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        UnconstrainedParams {
            eta0: logit(self.rho0),
            eta1: logit(self.rho1),
            mu0_raw: logit(self.mu0 / cfg.censor_limit_min),
            // equal means map to the smallest normal gap, which adds back to mu0 exactly
            delta_mu_raw: (self.mu1 - self.mu0).max(f64::MIN_POSITIVE).ln(),
            log_sigma0: (self.sigma0 - cfg.epsilon).ln(),
            log_sigma1: (self.sigma1 - cfg.epsilon).ln(),
            beta_age: self.beta[0],
            beta_age_mis: self.beta[1],
            beta_sex: self.beta[2],
            beta_sex_mis: self.beta[3],
        }
    }
}

/// Which covariates enter the sampled space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateMode {
    /// Time only; all four coefficients are fixed at zero.
    None,
    #[default]
    AgeSex,
}

impl CovariateMode {
    pub fn sampled_dim(self) -> usize {
        match self {
            CovariateMode::None => N_KERNEL_PARAMS,
            CovariateMode::AgeSex => N_PARAMS,
        }
    }

    /// Pads sampler coordinates to the full parameter vector.
    pub fn expand(self, sampled: &[f64]) -> [f64; N_PARAMS] {
        let mut full = [0.0; N_PARAMS];
        full[..sampled.len()].copy_from_slice(sampled);
        full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub censor_limit_min: f64,
    pub epsilon: f64,
    /// Prior location of `mu0`: mean censored time over voided rows.
    pub prior_t_mean: f64,
    /// `max(sd(t), 1)` over voided rows.
    pub prior_scale: f64,
}

impl ModelConfig {
    pub fn from_dataset(data: &PreparedDataset) -> Self {
        let t = data.voided_times();
        let prior_t_mean = if t.is_empty() {
            data.censor_limit_min / 2.0
        } else {
            t.iter().sum::<f64>() / t.len() as f64
        };
        Self {
            censor_limit_min: data.censor_limit_min,
            epsilon: DEFAULT_EPSILON,
            prior_t_mean,
            prior_scale: data.t_scale_min.max(1.0),
        }
    }
}

/// What is known about a patient's first void at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceState {
    /// Voided at `t_min` minutes.
    VoidedAt { t_min: f64 },
    /// Voided, but only after the censoring limit.
    VoidedCensored,
    /// No void observed by `t_min` minutes of elapsed time.
    NotYet { t_min: f64 },
    /// Never voided during the stay.
    NotObserved,
}

#[inline]
fn sigmoid_parts(eta: f64, eps: f64) -> (f64, f64, f64) {
    // (s, ln rho, ln(1 - rho)) with rho = clamp(s, eps, 1 - eps)
    let s = logistic(eta);
    if s < eps {
        (s, eps.ln(), (-eps).ln_1p())
    } else if s > 1.0 - eps {
        (s, (-eps).ln_1p(), eps.ln())
    } else {
        (s, -softplus(-eta), -softplus(eta))
    }
}

/// Maps sampler coordinates onto the model scale.
pub fn constrain(u: &UnconstrainedParams, cfg: &ModelConfig) -> ConstrainedParams {
    Transform::new(u, cfg).params
}

/// Forward transform together with the pieces the gradient needs.
struct Transform {
    params: ConstrainedParams,
    s0: f64,
    s1: f64,
    ln_rho: [f64; 2],
    ln_1m_rho: [f64; 2],
    s_mu: f64,
    delta_mu: f64,
    mu1_clamped: bool,
    exp_ls: [f64; 2],
}

impl Transform {
    fn new(u: &UnconstrainedParams, cfg: &ModelConfig) -> Self {
        let eps = cfg.epsilon;
        let c = cfg.censor_limit_min;
        let (s0, lr0, l1r0) = sigmoid_parts(u.eta0, eps);
        let (s1, lr1, l1r1) = sigmoid_parts(u.eta1, eps);
        let s_mu = logistic(u.mu0_raw);
        let mu0 = c * s_mu;
        let delta_mu = u.delta_mu_raw.exp();
        let mu1_free = mu0 + delta_mu;
        let mu1_clamped = mu1_free >= c;
        let exp_ls = [u.log_sigma0.exp(), u.log_sigma1.exp()];
        Transform {
            params: ConstrainedParams {
                rho0: s0.clamp(eps, 1.0 - eps),
                rho1: s1.clamp(eps, 1.0 - eps),
                mu0,
                mu1: mu1_free.min(c),
                sigma0: exp_ls[0] + eps,
                sigma1: exp_ls[1] + eps,
                beta: u.beta(),
            },
            s0,
            s1,
            ln_rho: [lr0, lr1],
            ln_1m_rho: [l1r0, l1r1],
            s_mu,
            delta_mu,
            mu1_clamped,
            exp_ls,
        }
    }
}

/// Whether `mu0 + delta_mu` hits the censoring limit at `u`.
pub fn mu1_clamp_active(u: &UnconstrainedParams, cfg: &ModelConfig) -> bool {
    Transform::new(u, cfg).mu1_clamped
}

/// Censoring-aware log-likelihood ratio of kernel 1 over kernel 0 at time `t`.
pub fn log_likelihood_ratio_delta(
    t: f64,
    censored: bool,
    p: &ConstrainedParams,
    cfg: &ModelConfig,
) -> f64 {
    if censored {
        let c = cfg.censor_limit_min;
        log_sf((c - p.mu1) / p.sigma1) - log_sf((c - p.mu0) / p.sigma0)
    } else {
        log_normal_pdf(t, p.mu1, p.sigma1) - log_normal_pdf(t, p.mu0, p.sigma0)
    }
}

#[inline]
fn log_ratio_voided(p: &ConstrainedParams) -> f64 {
    p.rho1.ln() - p.rho0.ln()
}

#[inline]
fn log_ratio_not_voided(p: &ConstrainedParams) -> f64 {
    (-p.rho1).ln_1p() - (-p.rho0).ln_1p()
}

/// Log-odds of admission for a prepared row.
pub fn observation_logit(row: &PreparedRow, p: &ConstrainedParams, cfg: &ModelConfig) -> f64 {
    let xb = p.linear_term(&row.covariates);
    if row.voided {
        log_ratio_voided(p) + log_likelihood_ratio_delta(row.t_min, row.censored, p, cfg) + xb
    } else {
        log_ratio_not_voided(p) + xb
    }
}

/// `ln{(1 - rho) + rho * sf((t - mu)/sigma)}`: log probability that a
/// patient of one kernel has not voided by `t`.
#[inline]
fn log_no_void_by(t: f64, rho: f64, mu: f64, sigma: f64) -> f64 {
    // = ln(1 - rho * cdf(z)), cdf(z) computed as sf(-z)
    (-rho * sf((mu - t) / sigma)).ln_1p()
}

/// Log-odds of admission under the evidence available at prediction time.
pub fn predict_logit(
    state: EvidenceState,
    x: &Covariates,
    p: &ConstrainedParams,
    cfg: &ModelConfig,
) -> Result<f64, RangeError> {
    let c = cfg.censor_limit_min;
    let check = |t: f64| {
        if (0.0..=c).contains(&t) {
            Ok(t)
        } else {
            Err(RangeError::Time { t, limit: c })
        }
    };
    let xb = p.linear_term(x);
    Ok(match state {
        EvidenceState::VoidedAt { t_min } => {
            let t = check(t_min)?;
            log_ratio_voided(p) + log_likelihood_ratio_delta(t, false, p, cfg) + xb
        }
        EvidenceState::VoidedCensored => {
            log_ratio_voided(p) + log_likelihood_ratio_delta(c, true, p, cfg) + xb
        }
        EvidenceState::NotYet { t_min } => {
            let t = check(t_min)?;
            log_no_void_by(t, p.rho1, p.mu1, p.sigma1) - log_no_void_by(t, p.rho0, p.mu0, p.sigma0)
                + xb
        }
        EvidenceState::NotObserved => log_ratio_not_voided(p) + xb,
    })
}

#[derive(Debug, Clone, Copy)]
struct TimedRow {
    t: f64,
    y: bool,
    x: [f64; 4],
}

#[derive(Debug, Clone, Copy)]
struct PlainRow {
    y: bool,
    x: [f64; 4],
}

/// Log-posterior over a fixed dataset, with rows pre-grouped by branch.
#[derive(Debug, Clone)]
pub struct TtuPosterior {
    cfg: ModelConfig,
    mode: CovariateMode,
    uncensored: Vec<TimedRow>,
    censored: Vec<PlainRow>,
    not_voided: Vec<PlainRow>,
    // log normalizer of the truncated-normal prior on mu0
    mu0_prior_log_z: f64,
}

impl TtuPosterior {
    pub fn new(data: &PreparedDataset, cfg: ModelConfig, mode: CovariateMode) -> Self {
        let mut uncensored = Vec::new();
        let mut censored = Vec::new();
        let mut not_voided = Vec::new();
        for row in data.rows() {
            let x = row.covariates.design();
            match (row.voided, row.censored) {
                (true, false) => uncensored.push(TimedRow {
                    t: row.t_min,
                    y: row.outcome,
                    x,
                }),
                (true, true) => censored.push(PlainRow { y: row.outcome, x }),
                (false, _) => not_voided.push(PlainRow { y: row.outcome, x }),
            }
        }
        let prior_sd = 2.0 * cfg.prior_scale;
        let upper = (cfg.censor_limit_min - cfg.prior_t_mean) / prior_sd;
        let lower = (0.0 - cfg.prior_t_mean) / prior_sd;
        let mu0_prior_log_z = (sf(lower) - sf(upper)).ln();
        Self {
            cfg,
            mode,
            uncensored,
            censored,
            not_voided,
            mu0_prior_log_z,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> CovariateMode {
        self.mode
    }

    /// Log-prior plus log-Jacobian, adding its gradient into `grad`.
    fn log_prior(&self, u: &UnconstrainedParams, tr: &Transform, grad: &mut [f64; N_PARAMS]) -> f64 {
        let cfg = &self.cfg;
        let scale = cfg.prior_scale;
        let c = cfg.censor_limit_min;
        let mut lp = 0.0;

        // eta_k ~ N(0, 1)
        for (k, eta) in [u.eta0, u.eta1].into_iter().enumerate() {
            lp += -0.5 * eta * eta - LN_SQRT_2PI;
            grad[k] -= eta;
        }

        // mu0 ~ TruncatedNormal(t_mean, 2 scale, 0, C), mu0 = C logistic(mu0_raw)
        let prior_sd = 2.0 * scale;
        let z = (tr.params.mu0 - cfg.prior_t_mean) / prior_sd;
        lp += -0.5 * z * z - LN_SQRT_2PI - prior_sd.ln() - self.mu0_prior_log_z;
        let dmu0 = c * tr.s_mu * (1.0 - tr.s_mu);
        grad[2] += -z / prior_sd * dmu0;
        lp += c.ln() - softplus(-u.mu0_raw) - softplus(u.mu0_raw);
        grad[2] += 1.0 - 2.0 * tr.s_mu;

        // delta_mu ~ HalfNormal(scale), delta_mu = exp(delta_mu_raw)
        let d = tr.delta_mu;
        lp += std::f64::consts::LN_2 - LN_SQRT_2PI - scale.ln() - 0.5 * (d / scale).powi(2);
        lp += u.delta_mu_raw;
        grad[3] += -(d * d) / (scale * scale) + 1.0;

        // log sigma_k ~ N(log scale, 1)
        let ln_scale = scale.ln();
        for (k, ls) in [u.log_sigma0, u.log_sigma1].into_iter().enumerate() {
            let r = ls - ln_scale;
            lp += -0.5 * r * r - LN_SQRT_2PI;
            grad[4 + k] -= r;
        }

        // beta ~ N(0, 1)
        if self.mode == CovariateMode::AgeSex {
            for (k, b) in u.beta().into_iter().enumerate() {
                lp += -0.5 * b * b - LN_SQRT_2PI;
                grad[6 + k] -= b;
            }
        }
        lp
    }

    /// Log-posterior and its gradient with respect to all ten coordinates.
    /// The covariate gradient is zero when covariates are excluded.
    pub fn log_posterior(&self, u: &UnconstrainedParams) -> (f64, [f64; N_PARAMS]) {
        let mut grad = [0.0; N_PARAMS];
        let tr = Transform::new(u, &self.cfg);
        let p = &tr.params;
        let beta = p.beta;
        let xb = |x: &[f64; 4]| beta[0] * x[0] + beta[1] * x[1] + beta[2] * x[2] + beta[3] * x[3];

        let a = tr.ln_rho[1] - tr.ln_rho[0];
        let b = tr.ln_1m_rho[1] - tr.ln_1m_rho[0];
        let (mu0, mu1, sd0, sd1) = (p.mu0, p.mu1, p.sigma0, p.sigma1);
        let (ln_sd0, ln_sd1) = (sd0.ln(), sd1.ln());
        let (inv0, inv1) = (1.0 / sd0, 1.0 / sd1);

        let mut ll = 0.0;
        let (mut g_a, mut g_b) = (0.0, 0.0);
        let (mut g_mu0, mut g_mu1, mut g_sd0, mut g_sd1) = (0.0, 0.0, 0.0, 0.0);
        let mut g_beta = [0.0; 4];
        let mut add_beta = |r: f64, x: &[f64; 4]| {
            for k in 0..4 {
                g_beta[k] += r * x[k];
            }
        };

        for row in &self.uncensored {
            let z0 = (row.t - mu0) * inv0;
            let z1 = (row.t - mu1) * inv1;
            let delta = -0.5 * z1 * z1 - ln_sd1 + 0.5 * z0 * z0 + ln_sd0;
            let (l, r) = bernoulli_logit(row.y, a + delta + xb(&row.x));
            ll += l;
            g_a += r;
            g_mu1 += r * z1 * inv1;
            g_sd1 += r * (z1 * z1 - 1.0) * inv1;
            g_mu0 -= r * z0 * inv0;
            g_sd0 -= r * (z0 * z0 - 1.0) * inv0;
            add_beta(r, &row.x);
        }

        if !self.censored.is_empty() {
            let c = self.cfg.censor_limit_min;
            let w0 = (c - mu0) * inv0;
            let w1 = (c - mu1) * inv1;
            let delta = log_sf(w1) - log_sf(w0);
            let mut r_sum = 0.0;
            for row in &self.censored {
                let (l, r) = bernoulli_logit(row.y, a + delta + xb(&row.x));
                ll += l;
                r_sum += r;
                add_beta(r, &row.x);
            }
            g_a += r_sum;
            let (lam0, lam1) = (inv_mills(w0), inv_mills(w1));
            g_mu1 += r_sum * lam1 * inv1;
            g_sd1 += r_sum * lam1 * w1 * inv1;
            g_mu0 -= r_sum * lam0 * inv0;
            g_sd0 -= r_sum * lam0 * w0 * inv0;
        }

        for row in &self.not_voided {
            let (l, r) = bernoulli_logit(row.y, b + xb(&row.x));
            ll += l;
            g_b += r;
            add_beta(r, &row.x);
        }

        // chain rule back to sampler coordinates
        grad[0] = -g_a * (1.0 - tr.s0) + g_b * tr.s0;
        grad[1] = g_a * (1.0 - tr.s1) - g_b * tr.s1;
        let dmu0 = self.cfg.censor_limit_min * tr.s_mu * (1.0 - tr.s_mu);
        let g_mu1_free = if tr.mu1_clamped { 0.0 } else { g_mu1 };
        grad[2] = (g_mu0 + g_mu1_free) * dmu0;
        grad[3] = g_mu1_free * tr.delta_mu;
        grad[4] = g_sd0 * tr.exp_ls[0];
        grad[5] = g_sd1 * tr.exp_ls[1];
        if self.mode == CovariateMode::AgeSex {
            grad[6..].copy_from_slice(&g_beta);
        }

        let lp = self.log_prior(u, &tr, &mut grad);
        (ll + lp, grad)
    }

    /// Log-prior (with Jacobian) alone.
    pub fn log_prior_only(&self, u: &UnconstrainedParams) -> f64 {
        let tr = Transform::new(u, &self.cfg);
        let mut g = [0.0; N_PARAMS];
        self.log_prior(u, &tr, &mut g)
    }
}

impl LogDensity for TtuPosterior {
    fn dim(&self) -> usize {
        self.mode.sampled_dim()
    }

    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let u = UnconstrainedParams::from_slice(&self.mode.expand(position));
        let (lp, g) = self.log_posterior(&u);
        grad.copy_from_slice(&g[..position.len()]);
        lp
    }

    /// The prior location: starting near unit scales would put kernel
    /// widths at a few minutes, where short warm-ups can stall.
    fn init_center(&self) -> Vec<f64> {
        let cfg = &self.cfg;
        let ls = cfg.prior_scale.ln();
        let mu0_raw = logit((cfg.prior_t_mean / cfg.censor_limit_min).clamp(0.01, 0.99));
        let full = [0.0, 0.0, mu0_raw, ls, ls, ls, 0.0, 0.0, 0.0, 0.0];
        full[..self.dim()].to_vec()
    }
}

/// Value and gradient of the log-posterior at `u`, with all ten coordinates free.
pub fn log_posterior_with_grad(
    u: &UnconstrainedParams,
    data: &PreparedDataset,
    cfg: &ModelConfig,
) -> (f64, [f64; N_PARAMS]) {
    TtuPosterior::new(data, *cfg, CovariateMode::AgeSex).log_posterior(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_dataset, PatientRecord, Sex};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            censor_limit_min: 300.0,
            epsilon: DEFAULT_EPSILON,
            prior_t_mean: 120.0,
            prior_scale: 60.0,
        }
    }

    fn theta_star() -> ConstrainedParams {
        ConstrainedParams {
            rho0: 0.3,
            rho1: 0.6,
            mu0: 80.0,
            mu1: 170.0,
            sigma0: 35.0,
            sigma1: 50.0,
            beta: [0.5, -0.2, 0.3, 0.1],
        }
    }

    fn oracle_row(t: f64, censored: bool, voided: bool) -> PreparedRow {
        PreparedRow {
            t_min: t,
            censored,
            voided,
            outcome: true,
            covariates: Covariates {
                age_std: 0.7,
                age_missing: false,
                sex01: 1.0,
                sex_missing: false,
            },
        }
    }

    #[test]
    fn constrain_basics() {
        let mut u = UnconstrainedParams::default();
        let p = constrain(&u, &cfg());
        assert_eq!(p.rho0, 0.5);
        assert_eq!(p.sigma0, 1.0 + 1e-6);
        // mu0 = 200, delta = 150 -> clamped at C
        u.mu0_raw = (200.0f64 / 100.0).ln();
        u.delta_mu_raw = 150f64.ln();
        let p = constrain(&u, &cfg());
        assert!((p.mu0 - 200.0).abs() < 1e-9);
        assert_eq!(p.mu1, 300.0);
        assert!(mu1_clamp_active(&u, &cfg()));
    }

    #[test]
    fn equal_kernels_cancel() {
        let p = ConstrainedParams::symmetric(0.4, 150.0, 40.0);
        for &(t, c) in &[(0.0, false), (77.0, false), (300.0, true)] {
            assert_eq!(log_likelihood_ratio_delta(t, c, &p, &cfg()), 0.0);
        }
    }

    #[test]
    fn delta_at_mu1_is_half_squared_distance() {
        let (sigma, d, mu1) = (40.0, 30.0, 150.0);
        let mut p = ConstrainedParams::symmetric(0.5, mu1, sigma);
        p.mu0 = mu1 - d;
        let got = log_likelihood_ratio_delta(mu1, false, &p, &cfg());
        let want = d * d / (2.0 * sigma * sigma);
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn censored_delta_matches_oracle() {
        let mut p = ConstrainedParams::symmetric(0.5, 0.0, 50.0);
        p.mu1 = 300.0;
        let got = log_likelihood_ratio_delta(300.0, true, &p, &cfg());
        // ln sf(0) - ln sf(6), mpmath
        let want = 20.043621769414760346;
        assert!(((got - want) / want).abs() < 1e-13);
    }

    #[test]
    fn observation_logit_matches_oracle() {
        let p = theta_star();
        let cases = [
            (oracle_row(120.0, false, true), 1.1395334611110088489),
            (oracle_row(300.0, true, true), 18.510861154738952697),
            (oracle_row(0.0, false, false), 0.090384212064577313729),
        ];
        for (row, want) in cases {
            let got = observation_logit(&row, &p, &cfg());
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn non_voided_logit_is_propensity_ratio() {
        let mut p = ConstrainedParams::symmetric(0.5, 100.0, 30.0);
        p.rho1 = 0.8;
        let row = PreparedRow {
            covariates: Covariates::default(),
            ..oracle_row(0.0, false, false)
        };
        let got = observation_logit(&row, &p, &cfg());
        assert!((got - (0.2f64 / 0.5).ln()).abs() < 1e-15);
        assert!((got + 0.9163).abs() < 1e-4);
    }

    #[test]
    fn symmetric_model_is_coin_flip() {
        let p = ConstrainedParams::symmetric(0.35, 140.0, 45.0);
        for row in [oracle_row(60.0, false, true), oracle_row(0.0, false, false)] {
            let row = PreparedRow {
                covariates: Covariates::default(),
                ..row
            };
            assert_eq!(observation_logit(&row, &p, &cfg()), 0.0);
        }
    }

    #[test]
    fn not_yet_matches_oracle() {
        let p = theta_star();
        let x = oracle_row(0.0, false, false).covariates;
        let cases = [
            (0.0, 0.65314406126689090303),
            (60.0, 0.73062507158545118079),
            (150.0, 0.76535910254385668328),
            (300.0, 0.097351664859218650027),
        ];
        for (t, want) in cases {
            let got = predict_logit(EvidenceState::NotYet { t_min: t }, &x, &p, &cfg()).unwrap();
            assert!((got - want).abs() < 1e-12, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn not_yet_at_arrival_carries_no_evidence() {
        // kernels far from zero: sf((0 - mu)/sigma) ~ 1
        let mut p = theta_star();
        p.beta = [0.0; 4];
        p.sigma0 = 5.0;
        p.sigma1 = 5.0;
        let got = predict_logit(EvidenceState::NotYet { t_min: 0.0 }, &Covariates::default(), &p, &cfg())
            .unwrap();
        assert!(got.abs() < 1e-15);
    }

    #[test]
    fn voided_at_equals_observation_logit() {
        let p = theta_star();
        let row = oracle_row(95.5, false, true);
        let a = predict_logit(EvidenceState::VoidedAt { t_min: 95.5 }, &row.covariates, &p, &cfg())
            .unwrap();
        assert_eq!(a, observation_logit(&row, &p, &cfg()));
    }

    #[test]
    fn prediction_time_out_of_range() {
        let p = theta_star();
        let x = Covariates::default();
        for s in [
            EvidenceState::NotYet { t_min: 301.0 },
            EvidenceState::VoidedAt { t_min: -1.0 },
        ] {
            assert!(predict_logit(s, &x, &p, &cfg()).is_err());
        }
    }

    #[test]
    fn not_yet_monotone_under_hazard_ordering() {
        // d/dt not_yet(t) = h0(t) - h1(t), with h_k the hazard of the
        // defective void-time distribution of kernel k. Whenever h0 >= h1 on
        // the whole grid, not_yet must be nondecreasing there.
        use statrs::distribution::{Continuous, ContinuousCDF, Normal};
        let hazard = |t: f64, rho: f64, mu: f64, sigma: f64| {
            let n = Normal::new(mu, sigma).unwrap();
            rho * n.pdf(t) / (1.0 - rho * n.cdf(t))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 50 {
            let rho0: f64 = rng.random_range(0.2..0.95);
            let mu0: f64 = rng.random_range(10.0..200.0);
            let p = ConstrainedParams {
                rho0,
                rho1: rho0 * rng.random_range(0.05..1.0),
                mu0,
                mu1: (mu0 + rng.random_range(0.0..100.0)).min(300.0),
                sigma0: rng.random_range(5.0..80.0),
                sigma1: rng.random_range(5.0..80.0),
                beta: [0.0; 4],
            };
            let ordered = (0..=300).all(|t| {
                let t = t as f64;
                hazard(t, p.rho0, p.mu0, p.sigma0) >= hazard(t, p.rho1, p.mu1, p.sigma1)
            });
            if !ordered {
                continue;
            }
            checked += 1;
            let mut prev = f64::NEG_INFINITY;
            for t in 0..=300 {
                let v = predict_logit(
                    EvidenceState::NotYet { t_min: t as f64 },
                    &Covariates::default(),
                    &p,
                    &cfg(),
                )
                .unwrap();
                assert!(v >= prev - 1e-12, "not monotone at t={t}: {v} < {prev}");
                prev = v;
            }
        }
    }

    fn small_dataset(seed: u64, n: usize) -> PreparedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs: Vec<PatientRecord> = (0..n)
            .map(|i| {
                let voided = rng.random_bool(0.7);
                PatientRecord {
                    id: i.to_string(),
                    ttu_raw_min: voided.then(|| rng.random_range(0.0..400.0)),
                    voided,
                    age_years: rng.random_bool(0.9).then(|| rng.random_range(20.0..95.0)),
                    sex: match rng.random_range(0..3) {
                        0 => None,
                        1 => Some(Sex::Female),
                        _ => Some(Sex::Male),
                    },
                    admitted: rng.random_bool(0.4),
                    catheter_at_presentation: false,
                    cpa_on_arrival: false,
                }
            })
            .collect();
        prepare_dataset(&recs, 300.0).unwrap()
    }

    /// Uniform within +-2 of each coordinate's prior location.
    fn random_point(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<f64> {
        let ls = cfg.prior_scale.ln();
        let center = [0.0, 0.0, 0.0, ls, ls, ls, 0.0, 0.0, 0.0, 0.0];
        center.iter().map(|c| c + rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = small_dataset(3, 60);
        let cfg = ModelConfig::from_dataset(&data);
        for _ in 0..20 {
            let v = random_point(&mut rng, &cfg);
            let u = UnconstrainedParams::from_slice(&v);
            let (_, g) = log_posterior_with_grad(&u, &data, &cfg);
            for k in 0..N_PARAMS {
                let h = 1e-5 * v[k].abs().max(1.0);
                let mut up = v.clone();
                up[k] += h;
                let mut dn = v.clone();
                dn[k] -= h;
                let fu = log_posterior_with_grad(&UnconstrainedParams::from_slice(&up), &data, &cfg).0;
                let fd = log_posterior_with_grad(&UnconstrainedParams::from_slice(&dn), &data, &cfg).0;
                let fdg = (fu - fd) / (2.0 * h);
                let rel = (g[k] - fdg).abs() / g[k].abs().max(fdg.abs()).max(1.0);
                assert!(rel < 1e-6, "coord {k}: analytic {} vs fd {fdg}", g[k]);
            }
        }
    }

    #[test]
    fn mirrored_outcomes_zero_the_covariate_gradient() {
        let base = small_dataset(5, 30);
        let mut data = base.clone();
        // duplicate every row with the opposite outcome
        let dup = |v: &Vec<f64>| v.iter().chain(v.iter()).copied().collect::<Vec<_>>();
        let dupb = |v: &Vec<bool>| v.iter().chain(v.iter()).copied().collect::<Vec<_>>();
        data.n = 2 * base.n;
        data.t_min = dup(&base.t_min);
        data.censored = dupb(&base.censored);
        data.voided = dupb(&base.voided);
        data.outcome = base.outcome.iter().copied().chain(base.outcome.iter().map(|y| !y)).collect();
        data.age_std = dup(&base.age_std);
        data.age_missing = dupb(&base.age_missing);
        data.sex01 = dup(&base.sex01);
        data.sex_missing = dupb(&base.sex_missing);
        let cfg = ModelConfig::from_dataset(&data);
        // symmetric parameters: equal propensities and kernels, beta = 0
        let u = UnconstrainedParams {
            delta_mu_raw: -40.0,
            log_sigma0: 3.0,
            log_sigma1: 3.0,
            ..Default::default()
        };
        let (_, g) = log_posterior_with_grad(&u, &data, &cfg);
        for k in 6..N_PARAMS {
            assert!(g[k].abs() < 1e-12, "beta grad {k} = {}", g[k]);
        }
    }

    #[test]
    fn translation_leaves_uncensored_delta_unchanged() {
        let p = theta_star();
        let shift = 17.25;
        let q = ConstrainedParams {
            mu0: p.mu0 + shift,
            mu1: p.mu1 + shift,
            ..p
        };
        for &t in &[0.0, 45.0, 133.3, 260.0] {
            let a = log_likelihood_ratio_delta(t, false, &p, &cfg());
            let b = log_likelihood_ratio_delta(t + shift, false, &q, &cfg());
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_is_finite_over_wide_scan() {
        let data = small_dataset(9, 10);
        let post = TtuPosterior::new(&data, ModelConfig::from_dataset(&data), CovariateMode::AgeSex);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..N_PARAMS).map(|_| rng.random_range(-15.0..15.0)).collect();
            let lp = post.log_prior_only(&UnconstrainedParams::from_slice(&v));
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn empty_likelihood_is_prior() {
        let data = small_dataset(2, 5);
        let mut empty = data.clone();
        empty.n = 0;
        for v in [
            &mut empty.t_min,
            &mut empty.age_std,
            &mut empty.sex01,
        ] {
            v.clear();
        }
        for v in [
            &mut empty.censored,
            &mut empty.voided,
            &mut empty.outcome,
            &mut empty.age_missing,
            &mut empty.sex_missing,
        ] {
            v.clear();
        }
        let cfg = ModelConfig::from_dataset(&data);
        let u = UnconstrainedParams {
            eta0: 0.3,
            log_sigma0: 1.0,
            ..Default::default()
        };
        let post = TtuPosterior::new(&empty, cfg, CovariateMode::AgeSex);
        assert_eq!(post.log_posterior(&u).0, post.log_prior_only(&u));
    }

    #[test]
    fn equal_kernels_make_covariates_the_whole_story() {
        let p = ConstrainedParams {
            beta: [0.4, 0.0, -0.7, 0.0],
            ..ConstrainedParams::symmetric(0.6, 120.0, 30.0)
        };
        let row = oracle_row(88.0, false, true);
        let got = observation_logit(&row, &p, &cfg());
        assert_eq!(got, p.linear_term(&row.covariates));
    }
}
