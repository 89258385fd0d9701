//! Fitting the TTU model: sampling, padding to the full parameter vector,
//! and the diagnostics report.

use crate::data::PreparedDataset;
use crate::diagnostics::{diagnose, DiagnosticsError, DiagnosticsReport};
use crate::model::{
    constrain, mu1_clamp_active, ConstrainedParams, CovariateMode, ModelConfig, TtuPosterior,
    UnconstrainedParams, N_PARAMS, PARAM_NAMES,
};
use crate::sampler::{nuts_sample, LogDensity, PosteriorDraws, SamplerConfig, SamplerError};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    /// Ten-column draws; fixed coefficients appear as zeros.
    pub draws: PosteriorDraws,
    pub report: DiagnosticsReport,
    pub model_cfg: ModelConfig,
    pub mode: CovariateMode,
    pub sampler_cfg: SamplerConfig,
}

impl FitOutput {
    pub fn constrained(&self) -> Vec<ConstrainedParams> {
        constrained_draws(&self.draws, &self.model_cfg)
    }
}

pub fn param_names() -> Vec<String> {
    PARAM_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Pads sampled coordinates (and metrics) with zeros up to ten columns.
pub fn expand_draws(mut draws: PosteriorDraws, mode: CovariateMode) -> PosteriorDraws {
    if draws.dim() < N_PARAMS {
        for chain in &mut draws.chains {
            for d in &mut chain.draws {
                *d = mode.expand(d).to_vec();
            }
            chain.mass_diag.resize(N_PARAMS, 0.0);
        }
        draws.param_names = param_names();
    }
    draws
}

/// Constrained view of every retained draw, chain-major.
pub fn constrained_draws(draws: &PosteriorDraws, cfg: &ModelConfig) -> Vec<ConstrainedParams> {
    draws
        .iter_draws()
        .map(|d| constrain(&UnconstrainedParams::from_slice(d), cfg))
        .collect()
}

/// Samples the posterior of `target` and reports diagnostics on all ten
/// coordinates.
pub fn fit_target<T: LogDensity + ?Sized>(
    target: &T,
    model_cfg: ModelConfig,
    mode: CovariateMode,
    sampler_cfg: &SamplerConfig,
) -> Result<FitOutput, FitError> {
    let names = param_names()[..target.dim()].to_vec();
    let draws = expand_draws(nuts_sample(target, sampler_cfg, names)?, mode);
    let mut report = diagnose(&draws, sampler_cfg.max_treedepth)?;
    report.mu1_clamp_count = draws
        .iter_draws()
        .filter(|d| mu1_clamp_active(&UnconstrainedParams::from_slice(d), &model_cfg))
        .count();
    Ok(FitOutput {
        draws,
        report,
        model_cfg,
        mode,
        sampler_cfg: *sampler_cfg,
    })
}

pub fn fit(
    data: &PreparedDataset,
    mode: CovariateMode,
    sampler_cfg: &SamplerConfig,
) -> Result<FitOutput, FitError> {
    let model_cfg = ModelConfig::from_dataset(data);
    let posterior = TtuPosterior::new(data, model_cfg, mode);
    fit_target(&posterior, model_cfg, mode, sampler_cfg)
}
