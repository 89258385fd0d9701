//! Convergence diagnostics over multi-chain draws.
//!
//! R-hat and ESS follow the rank-normalized split-chain definitions: chains
//! are halved, pooled draws are replaced by normal scores of their ranks, and
//! R-hat is the larger of the bulk and folded (`|x - median|`) values. ESS uses
//! FFT autocovariances with Geyer's initial monotone sequence.

use std::sync::Arc;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::sampler::PosteriorDraws;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("need at least {min_chains} chains of at least {min_draws} draws")]
    TooFewDraws { min_chains: usize, min_draws: usize },
    #[error("chains have unequal lengths")]
    RaggedChains,
    #[error("degenerate energy series")]
    DegenerateEnergy,
    #[error("too many bins: {bins} bins for {draws} draws per chain")]
    TooManyBins { bins: usize, draws: usize },
}

/// Share of divergent transitions above which a run is marked failed.
pub const MAX_DIVERGENT_FRACTION: f64 = 0.25;
pub const RANK_BINS: usize = 20;

fn check_shape(chains: &[Vec<f64>], min_chains: usize) -> Result<usize, DiagnosticsError> {
    let err = DiagnosticsError::TooFewDraws {
        min_chains,
        min_draws: 4,
    };
    if chains.len() < min_chains {
        return Err(err);
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::RaggedChains);
    }
    if n < 4 {
        return Err(err);
    }
    Ok(n)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|&v| v == first)
}

/// Splits each chain into halves, dropping the middle draw of odd chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Average ranks (1-based) of pooled values.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Replaces pooled draws by normal scores of their ranks (Blom offsets).
fn z_scale(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len() as f64;
    let ranks = average_ranks(&pooled);
    let normal = Normal::standard();
    let mut it = ranks.into_iter();
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| normal.inverse_cdf((it.next().unwrap() - 0.375) / (s + 0.25)))
                .collect()
        })
        .collect()
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b_over_n = sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Type-7 (linear interpolation) sample quantile.
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

/// Type-7 quantile of already sorted data.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Rank-normalized split R-hat: the larger of the bulk and folded values.
/// Returns 1.0 for a parameter that is constant across all draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    check_shape(chains, 2)?;
    if is_constant(chains) {
        return Ok(1.0);
    }
    let split = split_chains(chains);
    let bulk = rhat_basic(&z_scale(&split));
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let med = median(&pooled);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = if is_constant(&folded) {
        1.0
    } else {
        rhat_basic(&z_scale(&folded))
    };
    Ok(bulk.max(tail))
}

/// Biased autocovariance of one series at all lags, via FFT.
fn autocovariance(x: &[f64], fft: &Arc<dyn rustfft::Fft<f64>>, ifft: &Arc<dyn rustfft::Fft<f64>>) -> Vec<f64> {
    let n = x.len();
    let len = fft.len();
    let m = mean(x);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    fft.process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    ifft.process(&mut buf);
    buf[..n].iter().map(|c| c.re / (len as f64 * n as f64)).collect()
}

/// ESS of already split (and possibly transformed) chains.
fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    if is_constant(chains) {
        return total;
    }
    let len = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(len);
    let ifft = planner.plan_fft_inverse(len);
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c, &fft, &ifft)).collect();
    let nf = n as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chain_means);
    }
    let rho_at = |lag: usize| 1.0 - (mean_var - acov.iter().map(|a| a[lag]).sum::<f64>() / m as f64) / var_plus;

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = if n > 1 { rho_at(1) } else { 0.0 };
    rho[1] = odd;
    let mut t = 0;
    while t + 5 < n && (even + odd) > 0.0 {
        t += 2;
        even = rho_at(t);
        odd = rho_at(t + 1);
        if even + odd >= 0.0 {
            rho[t] = even;
            rho[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t] = even;
    }
    // initial monotone sequence
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        let prev = rho[t - 2] + rho[t - 1];
        if rho[t] + rho[t + 1] > prev {
            rho[t] = prev / 2.0;
            rho[t + 1] = prev / 2.0;
        }
    }
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t];
    let tau = tau.max(1.0 / total.log10());
    total / tau
}

/// Bulk ESS: ESS of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    check_shape(chains, 1)?;
    if is_constant(chains) {
        return Ok(chains.iter().map(Vec::len).sum::<usize>() as f64);
    }
    Ok(ess_basic(&z_scale(&split_chains(chains))))
}

/// Tail ESS: the smaller ESS of the 5% and 95% quantile indicators.
pub fn ess_tail(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    check_shape(chains, 1)?;
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let split = split_chains(chains);
    let ess_at = |p: f64| {
        let q = quantile_sorted(&sorted, p);
        let ind: Vec<Vec<f64>> = split
            .iter()
            .map(|c| c.iter().map(|&v| f64::from(u8::from(v <= q))).collect())
            .collect();
        ess_basic(&ind)
    };
    Ok(ess_at(0.05).min(ess_at(0.95)))
}

/// Which ESS flavour to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EssKind {
    Bulk,
    Tail,
}

pub fn ess(chains: &[Vec<f64>], kind: EssKind) -> Result<f64, DiagnosticsError> {
    match kind {
        EssKind::Bulk => ess_bulk(chains),
        EssKind::Tail => ess_tail(chains),
    }
}

/// Monte Carlo standard error of the posterior mean, `sd / sqrt(ESS_bulk)`.
pub fn mcse_mean(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let e = ess_bulk(chains)?;
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    Ok(sample_var(&pooled).sqrt() / e.sqrt())
}

/// Energy Bayesian fraction of missing information of one chain.
pub fn ebfmi(energy: &[f64]) -> Result<f64, DiagnosticsError> {
    if energy.len() < 2 {
        return Err(DiagnosticsError::TooFewDraws {
            min_chains: 1,
            min_draws: 2,
        });
    }
    let m = mean(energy);
    let var = energy.iter().map(|e| (e - m).powi(2)).sum::<f64>() / energy.len() as f64;
    if !(var > 0.0) {
        return Err(DiagnosticsError::DegenerateEnergy);
    }
    let diffs = energy.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>();
    Ok(diffs / (energy.len() - 1) as f64 / var)
}

/// Per-chain histograms of pooled ranks. Ties are broken by pooled order
/// (chain-major), so counts always sum to the draws per chain.
pub fn rank_histogram(chains: &[Vec<f64>], bins: usize) -> Result<Vec<Vec<usize>>, DiagnosticsError> {
    let n = chains.first().map_or(0, Vec::len);
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::RaggedChains);
    }
    if bins == 0 || bins > n {
        return Err(DiagnosticsError::TooManyBins { bins, draws: n });
    }
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let total = pooled.len();
    let mut counts = vec![vec![0; bins]; chains.len()];
    for (rank, &i) in idx.iter().enumerate() {
        counts[i / n][rank * bins / total] += 1;
    }
    Ok(counts)
}

/// Chi-square goodness-of-fit p-value of counts against a uniform law.
pub fn chi_square_uniform_pvalue(counts: &[usize]) -> f64 {
    let k = counts.len();
    let total: usize = counts.iter().sum();
    let expected = total as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    ChiSquared::new((k - 1) as f64).unwrap().sf(stat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub status: RunStatus,
    pub param_names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub ess_tail: Vec<f64>,
    /// MCSE of the posterior mean.
    pub mcse_mean: Vec<f64>,
    /// `None` where a chain's energy series is degenerate.
    pub ebfmi: Vec<Option<f64>>,
    pub divergence_count: usize,
    pub total_transitions: usize,
    pub treedepth_saturation: usize,
    pub mean_accept_prob: f64,
    /// `[param][chain][bin]`.
    pub rank_histograms: Vec<Vec<Vec<usize>>>,
    /// Draws at which the upper mean sits on the censoring limit.
    #[serde(default)]
    pub mu1_clamp_count: usize,
}

impl DiagnosticsReport {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Full report for a run. Parameters that are constant (e.g. coefficients
/// fixed at zero) get R-hat 1 and ESS equal to the draw count.
pub fn diagnose(draws: &PosteriorDraws, max_treedepth: u32) -> Result<DiagnosticsReport, DiagnosticsError> {
    let dim = draws.dim();
    let mut rhat = Vec::with_capacity(dim);
    let mut eb = Vec::with_capacity(dim);
    let mut et = Vec::with_capacity(dim);
    let mut mcse = Vec::with_capacity(dim);
    let mut hist = Vec::with_capacity(dim);
    let bins = RANK_BINS.min(draws.n_draws());
    for k in 0..dim {
        let chains = draws.param(k);
        rhat.push(if chains.len() >= 2 { split_rhat(&chains)? } else { f64::NAN });
        eb.push(ess_bulk(&chains)?);
        et.push(ess_tail(&chains)?);
        mcse.push(mcse_mean(&chains)?);
        hist.push(rank_histogram(&chains, bins)?);
    }
    let stats: Vec<_> = draws.chains.iter().flat_map(|c| &c.stats).collect();
    let total = stats.len();
    let divergence_count = stats.iter().filter(|s| s.divergent).count();
    let status = if divergence_count as f64 > MAX_DIVERGENT_FRACTION * total as f64 {
        RunStatus::Failed
    } else {
        RunStatus::Ok
    };
    Ok(DiagnosticsReport {
        status,
        param_names: draws.param_names.clone(),
        rhat,
        ess_bulk: eb,
        ess_tail: et,
        mcse_mean: mcse,
        ebfmi: draws.chains.iter().map(|c| ebfmi(&c.energy()).ok()).collect(),
        divergence_count,
        total_transitions: total,
        treedepth_saturation: stats.iter().filter(|s| s.tree_depth >= max_treedepth).count(),
        mean_accept_prob: stats.iter().map(|s| s.accept_prob).sum::<f64>() / total.max(1) as f64,
        rank_histograms: hist,
        mu1_clamp_count: 0,
    })
}
