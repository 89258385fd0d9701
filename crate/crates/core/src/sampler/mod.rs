//! Multi-chain NUTS with staged warm-up adaptation.
//!
//! Each chain owns a ChaCha8 stream seeded with `seed ^ chain`, starts from
//! `Uniform(-2, 2)` coordinates, and adapts its step size by dual averaging
//! and its diagonal metric over doubling windows. Chains run on the rayon
//! pool; the output is identical regardless of scheduling.

pub mod adapt;
pub mod nuts;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use adapt::{regularize_variance, DualAveraging, WindowSchedule, Welford};
pub use nuts::TransitionStats;
use nuts::{find_reasonable_step, transition, Point};

/// Differentiable log density on an unconstrained space.
///
/// A non-finite return value (or gradient) marks the evaluation as
/// divergent; implementations should not panic.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;
    /// Center of the uniform initialization box.
    fn init_center(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        (**self).logp_grad(position, grad)
    }
    fn init_center(&self) -> Vec<f64> {
        (**self).init_center()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("chain {chain}: no finite starting point after {attempts} attempts")]
    Initialization { chain: usize, attempts: usize },
}

pub const INIT_ATTEMPTS: usize = 100;
pub const INIT_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_treedepth: u32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 3000,
            draws: 3000,
            target_accept: 0.90,
            max_treedepth: 12,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let err = |m: &str| Err(SamplerError::Config(m.to_string()));
        if self.chains == 0 {
            return err("chains must be at least 1");
        }
        if self.warmup < 100 {
            return err("warmup must be at least 100");
        }
        if self.draws == 0 {
            return err("draws must be at least 1");
        }
        if !(0.5..1.0).contains(&self.target_accept) {
            return err("target_accept must lie in [0.5, 1)");
        }
        if self.max_treedepth == 0 {
            return err("max_treedepth must be at least 1");
        }
        Ok(())
    }

    pub fn chain_seed(&self, chain: usize) -> u64 {
        self.seed ^ chain as u64
    }
}

/// Retained (post-warm-up) output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// `draws[iter][param]` on the sampler's coordinates.
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<TransitionStats>,
    pub step_size: f64,
    /// Adapted inverse metric (posterior variance estimate).
    pub mass_diag: Vec<f64>,
    pub seed: u64,
}

impl Chain {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[k]).collect()
    }

    pub fn energy(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.energy).collect()
    }
}

/// Draws from all chains of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub param_names: Vec<String>,
    pub chains: Vec<Chain>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    pub fn dim(&self) -> usize {
        self.param_names.len()
    }

    /// Per-chain series of parameter `k`.
    pub fn param(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.column(k)).collect()
    }

    /// All draws, chain-major.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.chains.iter().flat_map(|c| c.draws.iter().map(|d| d.as_slice()))
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| s.divergent)
            .count()
    }
}

fn initial_point<T: LogDensity + ?Sized>(
    target: &T,
    rng: &mut ChaCha8Rng,
    chain: usize,
) -> Result<Point, SamplerError> {
    let center = target.init_center();
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = center
            .iter()
            .map(|c| c + rng.random_range(-INIT_RADIUS..INIT_RADIUS))
            .collect();
        let point = Point::new(target, q);
        if point.is_finite() {
            return Ok(point);
        }
    }
    Err(SamplerError::Initialization {
        chain,
        attempts: INIT_ATTEMPTS,
    })
}

/// Runs warm-up and sampling for one chain.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<Chain, SamplerError> {
    let seed = cfg.chain_seed(chain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = target.dim();
    let mut point = initial_point(target, &mut rng, chain)?;
    let mut inv_mass = vec![1.0; dim];
    let mut step = find_reasonable_step(target, &point, &inv_mass, 1.0, &mut rng);

    let mut da = DualAveraging::new(cfg.target_accept);
    da.restart(step);
    let mut schedule = WindowSchedule::new(cfg.warmup);
    let mut welford = Welford::new(dim);

    for _ in 0..cfg.warmup {
        let (next, stats) = transition(target, &point, &inv_mass, step, cfg.max_treedepth, &mut rng);
        point = next;
        step = da.update(stats.accept_prob);
        if schedule.in_slow_window() {
            welford.add(&point.q);
        }
        if schedule.step() {
            inv_mass = regularize_variance(&welford.sample_variance(), welford.count());
            welford.reset();
            step = find_reasonable_step(target, &point, &inv_mass, step, &mut rng);
            da.restart(step);
        }
    }
    step = da.final_step_size();

    let mut draws = Vec::with_capacity(cfg.draws);
    let mut all_stats = Vec::with_capacity(cfg.draws);
    for _ in 0..cfg.draws {
        let (next, stats) = transition(target, &point, &inv_mass, step, cfg.max_treedepth, &mut rng);
        point = next;
        draws.push(point.q.clone());
        all_stats.push(stats);
    }
    Ok(Chain {
        draws,
        stats: all_stats,
        step_size: step,
        mass_diag: inv_mass,
        seed,
    })
}

/// Samples `cfg.chains` chains in parallel.
pub fn nuts_sample<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    param_names: Vec<String>,
) -> Result<PosteriorDraws, SamplerError> {
    cfg.validate()?;
    if param_names.len() != target.dim() {
        return Err(SamplerError::Config(format!(
            "{} parameter names for a {}-dimensional target",
            param_names.len(),
            target.dim()
        )));
    }
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PosteriorDraws {
        param_names,
        chains,
    })
}

/// Generic names `x0, x1, ...`.
pub fn default_names(dim: usize) -> Vec<String> {
    (0..dim).map(|k| format!("x{k}")).collect()
}

#[cfg(test)]
pub(crate) mod test_targets {
    use super::LogDensity;

    /// Independent Gaussian with per-coordinate scales.
    pub struct Gaussian {
        pub scales: Vec<f64>,
    }

    impl Gaussian {
        pub fn standard(dim: usize) -> Self {
            Self {
                scales: vec![1.0; dim],
            }
        }
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.scales.len()
        }
        fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for ((g, &v), &s) in grad.iter_mut().zip(x).zip(&self.scales) {
                let z = v / s;
                lp -= 0.5 * z * z;
                *g = -z / s;
            }
            lp
        }
    }
}
