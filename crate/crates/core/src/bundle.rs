//! On-disk model bundles: a JSON manifest, one CSV of draws per chain and the
//! diagnostics report.
//!
//! Draw values are written in scientific notation with 17 significant
//! digits, which round-trips every `f64` exactly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AgeStandardization, PreparedDataset, SEX_ENCODING};
use crate::diagnostics::{DiagnosticsReport, RunStatus};
use crate::fit::{constrained_draws, FitOutput};
use crate::predictive::CumulativeCurve;
use crate::model::{ConstrainedParams, CovariateMode, ModelConfig, N_PARAMS};
use crate::sampler::{Chain, PosteriorDraws, SamplerConfig, TransitionStats};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const CURVE_FILE: &str = "curve.json";
pub const FORMAT_VERSION: u32 = 1;
/// Largest R-hat a servable bundle may report.
pub const MAX_SERVABLE_RHAT: f64 = 1.05;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path} line {line}: {message}")]
    Draws {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("bundle refused: {0}")]
    Refused(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub digest: String,
    pub n: usize,
    pub n_voided: usize,
    pub age_mean: f64,
    pub age_sd: f64,
    pub t_scale_min: f64,
    pub censor_limit_min: f64,
}

impl DatasetSummary {
    pub fn of(data: &PreparedDataset) -> Self {
        Self {
            digest: data.digest(),
            n: data.n,
            n_voided: data.n_voided(),
            age_mean: data.age_mean,
            age_sd: data.age_sd,
            t_scale_min: data.t_scale_min,
            censor_limit_min: data.censor_limit_min,
        }
    }

    pub fn standardization(&self) -> AgeStandardization {
        AgeStandardization {
            mean: self.age_mean,
            sd: self.age_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainInfo {
    pub file: String,
    pub seed: u64,
    pub step_size: f64,
    pub mass_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub created_unix: u64,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub covariate_mode: CovariateMode,
    pub config_digest: String,
    pub param_names: Vec<String>,
    pub dataset: DatasetSummary,
    pub sex_encoding: String,
    pub chains: Vec<ChainInfo>,
}

/// A fitted posterior as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub manifest: Manifest,
    pub draws: PosteriorDraws,
    pub diagnostics: DiagnosticsReport,
    /// Cumulative curve on the fitting data, when it was computed.
    pub curve: Option<CumulativeCurve>,
}

impl ModelBundle {
    pub fn from_fit(fit: &FitOutput, data: &PreparedDataset) -> Self {
        let config_digest = {
            let json = serde_json::to_string(&(&fit.sampler_cfg, &fit.model_cfg, fit.mode))
                .expect("config serializes");
            hex::encode(Sha256::digest(json.as_bytes()))
        };
        let dataset = DatasetSummary::of(data);
        let model_id = {
            let mut h = Sha256::new();
            h.update(dataset.digest.as_bytes());
            h.update(config_digest.as_bytes());
            hex::encode(h.finalize())[..16].to_string()
        };
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let chains = fit
            .draws
            .chains
            .iter()
            .enumerate()
            .map(|(c, ch)| ChainInfo {
                file: format!("chain_{c}.csv"),
                seed: ch.seed,
                step_size: ch.step_size,
                mass_diag: ch.mass_diag.clone(),
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                model_id,
                created_unix,
                sampler: fit.sampler_cfg,
                model: fit.model_cfg,
                covariate_mode: fit.mode,
                config_digest,
                param_names: fit.draws.param_names.clone(),
                dataset,
                sex_encoding: SEX_ENCODING.to_string(),
                chains,
            },
            draws: fit.draws.clone(),
            diagnostics: fit.report.clone(),
            curve: None,
        }
    }

    pub fn constrained(&self) -> Vec<ConstrainedParams> {
        constrained_draws(&self.draws, &self.manifest.model)
    }

    pub fn standardization(&self) -> AgeStandardization {
        self.manifest.dataset.standardization()
    }

    /// Refuses failed runs and unconverged posteriors.
    pub fn check_servable(&self) -> Result<(), BundleError> {
        if self.diagnostics.status == RunStatus::Failed {
            return Err(BundleError::Refused(
                "diagnostics status is FAILED".to_string(),
            ));
        }
        let r = self.diagnostics.max_rhat();
        if !(r <= MAX_SERVABLE_RHAT) {
            return Err(BundleError::Refused(format!(
                "max R-hat {r} exceeds {MAX_SERVABLE_RHAT}"
            )));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_json(&dir.join(DIAGNOSTICS_FILE), &self.diagnostics)?;
        for (info, chain) in self.manifest.chains.iter().zip(&self.draws.chains) {
            write_chain_csv(&dir.join(&info.file), &self.manifest.param_names, chain)?;
        }
        if let Some(curve) = &self.curve {
            write_json(&dir.join(CURVE_FILE), curve)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, BundleError> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        let diagnostics: DiagnosticsReport = read_json(&dir.join(DIAGNOSTICS_FILE))?;
        let mut chains = Vec::with_capacity(manifest.chains.len());
        for info in &manifest.chains {
            let (draws, stats) = read_chain_csv(&dir.join(&info.file), manifest.param_names.len())?;
            chains.push(Chain {
                draws,
                stats,
                step_size: info.step_size,
                mass_diag: info.mass_diag.clone(),
                seed: info.seed,
            });
        }
        let curve_path = dir.join(CURVE_FILE);
        let curve = if curve_path.exists() {
            Some(read_json(&curve_path)?)
        } else {
            None
        };
        Ok(Self {
            curve,
            draws: PosteriorDraws {
                param_names: manifest.param_names.clone(),
                chains,
            },
            manifest,
            diagnostics,
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> BundleError {
    BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BundleError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| BundleError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BundleError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| BundleError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_chain_csv(path: &Path, names: &[String], chain: &Chain) -> Result<(), BundleError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["iter".to_string()];
    header.extend(names.iter().cloned());
    header.extend(["energy", "accept_prob", "tree_depth", "divergent"].map(String::from));
    let mut out = header.join(",");
    out.push('\n');
    for (i, (d, s)) in chain.draws.iter().zip(&chain.stats).enumerate() {
        out.push_str(&i.to_string());
        for v in d {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            fmt17(s.energy),
            fmt17(s.accept_prob),
            s.tree_depth,
            u8::from(s.divergent)
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

type ChainRows = (Vec<Vec<f64>>, Vec<TransitionStats>);

fn read_chain_csv(path: &Path, dim: usize) -> Result<ChainRows, BundleError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, message: String| BundleError::Draws {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut draws = Vec::new();
    let mut stats = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if i == 0 {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 5 {
            return Err(bad(i + 1, format!("expected {} cells, got {}", dim + 5, cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, format!("{s:?}: {e}")));
        let d = cells[1..=dim].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
        let tree_depth = cells[dim + 3]
            .parse()
            .map_err(|e| bad(i + 1, format!("tree_depth: {e}")))?;
        stats.push(TransitionStats {
            energy: num(cells[dim + 1])?,
            accept_prob: num(cells[dim + 2])?,
            tree_depth,
            divergent: cells[dim + 4] == "1",
            n_leapfrog: 0,
        });
        draws.push(d);
    }
    Ok((draws, stats))
}

/// Flattened draws thinned to at most `max_draws` by a fixed stride.
pub fn thin<T: Clone>(items: &[T], max_draws: usize) -> (Vec<T>, usize) {
    let stride = items.len().div_ceil(max_draws.max(1)).max(1);
    (items.iter().step_by(stride).cloned().collect(), stride)
}

/// Bundle with all ten coordinates identical to `u` in every draw: useful as
/// a deterministic fixture.
pub fn constant_bundle(
    params: &ConstrainedParams,
    model: ModelConfig,
    data: &PreparedDataset,
    chains: usize,
    draws_per_chain: usize,
) -> ModelBundle {
    let u = params.to_unconstrained(&model).to_array();
    let draws = PosteriorDraws {
        param_names: crate::fit::param_names(),
        chains: (0..chains)
            .map(|c| Chain {
                draws: vec![u.to_vec(); draws_per_chain],
                stats: vec![
                    TransitionStats {
                        energy: c as f64,
                        accept_prob: 1.0,
                        tree_depth: 1,
                        divergent: false,
                        n_leapfrog: 0,
                    };
                    draws_per_chain
                ],
                step_size: 1.0,
                mass_diag: vec![1.0; N_PARAMS],
                seed: c as u64,
            })
            .collect(),
    };
    let mut report = crate::diagnostics::diagnose(&draws, 12).expect("fixture shape is valid");
    report.mu1_clamp_count = 0;
    let fit = FitOutput {
        draws,
        report,
        model_cfg: model,
        mode: CovariateMode::AgeSex,
        sampler_cfg: SamplerConfig {
            chains,
            warmup: 100,
            draws: draws_per_chain,
            ..Default::default()
        },
    };
    ModelBundle::from_fit(&fit, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_dataset, PatientRecord, Sex};
    use crate::fit::fit;
    use crate::model::CovariateMode;

    fn tiny_data() -> PreparedDataset {
        let recs: Vec<PatientRecord> = (0..40)
            .map(|i| PatientRecord {
                id: format!("p{i}"),
                ttu_raw_min: (i % 3 != 0).then_some(20.0 + 9.0 * i as f64),
                voided: i % 3 != 0,
                age_years: Some(40.0 + i as f64),
                sex: Some(if i % 2 == 0 { Sex::Female } else { Sex::Male }),
                admitted: i % 4 == 1 || i % 5 == 0,
                catheter_at_presentation: false,
                cpa_on_arrival: false,
            })
            .collect();
        prepare_dataset(&recs, 300.0).unwrap()
    }

    #[test]
    fn draws_round_trip_bit_exactly() {
        let data = tiny_data();
        let cfg = SamplerConfig {
            chains: 2,
            warmup: 100,
            draws: 50,
            seed: 9,
            ..Default::default()
        };
        let out = fit(&data, CovariateMode::AgeSex, &cfg).unwrap();
        let bundle = ModelBundle::from_fit(&out, &data);
        let dir = tempfile::tempdir().unwrap();
        bundle.write(dir.path()).unwrap();
        let back = ModelBundle::read(dir.path()).unwrap();
        assert_eq!(back.manifest, bundle.manifest);
        assert_eq!(back.diagnostics, bundle.diagnostics);
        for (a, b) in back.draws.chains.iter().zip(&bundle.draws.chains) {
            assert_eq!(a.draws, b.draws);
            for (x, y) in a.stats.iter().zip(&b.stats) {
                assert_eq!(x.energy.to_bits(), y.energy.to_bits());
                assert_eq!(x.accept_prob.to_bits(), y.accept_prob.to_bits());
                assert_eq!((x.tree_depth, x.divergent), (y.tree_depth, y.divergent));
            }
        }
        let header = std::fs::read_to_string(dir.path().join("chain_0.csv")).unwrap();
        assert!(header.starts_with(
            "iter,eta0,eta1,mu0_raw,delta_mu_raw,log_sigma0,log_sigma1,beta_age,beta_age_mis,beta_sex,beta_sex_mis,energy,accept_prob,tree_depth,divergent\n"
        ));
    }

    #[test]
    fn covariate_free_fit_pads_zero_coefficients() {
        let data = tiny_data();
        let cfg = SamplerConfig {
            chains: 2,
            warmup: 100,
            draws: 30,
            seed: 1,
            ..Default::default()
        };
        let out = fit(&data, CovariateMode::None, &cfg).unwrap();
        assert_eq!(out.draws.dim(), N_PARAMS);
        for d in out.draws.iter_draws() {
            assert_eq!(&d[6..], &[0.0; 4]);
        }
        assert_eq!(out.report.rhat[6], 1.0);
    }

    #[test]
    fn refuses_failed_or_unconverged_bundles() {
        let data = tiny_data();
        let p = ConstrainedParams::symmetric(0.5, 100.0, 30.0);
        let mut b = constant_bundle(&p, ModelConfig::from_dataset(&data), &data, 2, 10);
        assert!(b.check_servable().is_ok());
        b.diagnostics.status = RunStatus::Failed;
        assert!(b.check_servable().is_err());
        b.diagnostics.status = RunStatus::Ok;
        b.diagnostics.rhat[3] = 1.06;
        assert!(b.check_servable().is_err());
    }

    #[test]
    fn thinning_stride() {
        let v: Vec<usize> = (0..12000).collect();
        let (t, s) = thin(&v, 2000);
        assert_eq!(s, 6);
        assert_eq!(t.len(), 2000);
        let (t, s) = thin(&v[..100], 2000);
        assert_eq!((t.len(), s), (100, 1));
    }
}
