//! Command-line entry points. Exit codes: 0 success, 1 usage, 2 data or
//! bundle error, 3 sampling failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bundle::{read_json, thin, write_json, ModelBundle};
use crate::data::{apply_exclusions, prepare_dataset, prepare_dataset_with, read_dataset, write_dataset, PreparedDataset};
use crate::diagnostics::RunStatus;
use crate::evaluation::dca::{decision_curve, default_thresholds, DEFAULT_BOOTSTRAP};
use crate::evaluation::gof::gof_metrics;
use crate::evaluation::jitter::jitter_robustness;
use crate::evaluation::landmark::{landmark_probabilities, landmark_report, LANDMARKS_MIN};
use crate::evaluation::metrics::{auc, brier, calibration_fit, decile_table, equal_width_table, platt_recalibrate};
use crate::fit::fit;
use crate::model::{ConstrainedParams, CovariateMode};
use crate::predictive::{cumulative_curve, default_grid, write_curve_csv, CurveSidecar, Normalization, DEFAULT_LEVEL};
use crate::sampler::SamplerConfig;
use crate::service::{serve, AppState, ServedModel, BUNDLE_ENV, MAX_SERVED_DRAWS};
use crate::simulate::{generate_cohort, sbc_run, SbcConfig, SimConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SAMPLING: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ttu", version, about = "Admission risk from time to first urination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model to a cohort CSV and write a bundle.
    Fit(FitArgs),
    /// Write a synthetic cohort CSV from a JSON simulation config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curve goodness of fit and landmark metrics.
    Evaluate {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long)]
        out: PathBuf,
    },
    /// Platt recalibration at the given landmarks.
    Recalibrate {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long, value_delimiter = ',', default_values_t = [120.0, 300.0])]
        landmarks: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decision-curve analysis at one landmark.
    Dca {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long, default_value_t = 120.0)]
        landmark: f64,
        /// Bundle of a comparison model for net-benefit differences.
        #[arg(long)]
        baseline_bundle: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Landmark metrics under jittered voiding times.
    Robustness {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0])]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulation-based calibration of the fitting pipeline.
    Sbc {
        #[arg(long, default_value_t = 100)]
        replications: usize,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        chains: usize,
        #[arg(long, default_value_t = 300)]
        warmup: usize,
        #[arg(long, default_value_t = 300)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve predictions over HTTP.
    Serve {
        #[arg(long, env = BUNDLE_ENV)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Allowed browser origin, or `*` for any.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 3000)]
    warmup: usize,
    #[arg(long, default_value_t = 3000)]
    draws: usize,
    #[arg(long, default_value_t = 0.90)]
    target_accept: f64,
    #[arg(long, default_value_t = 12)]
    max_treedepth: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300.0)]
    censor: f64,
    #[arg(long, value_enum, default_value_t = CovariateArg::AgeSex)]
    covariates: CovariateArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum CovariateArg {
    None,
    AgeSex,
}

impl From<CovariateArg> for CovariateMode {
    fn from(a: CovariateArg) -> Self {
        match a {
            CovariateArg::None => CovariateMode::None,
            CovariateArg::AgeSex => CovariateMode::AgeSex,
        }
    }
}

#[derive(Debug, Args)]
struct EvalIo {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    error: anyhow::Error,
}

trait OrExit<T> {
    fn or_exit(self, code: i32) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: i32) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate { config, out } => {
            let cfg: SimConfig = read_json(&config).or_exit(EXIT_DATA)?;
            let records = generate_cohort(&cfg).or_exit(EXIT_DATA)?;
            write_dataset(&out, &records).or_exit(EXIT_DATA)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
        Command::Evaluate { io, out } => cmd_evaluate(&io, &out),
        Command::Recalibrate { io, landmarks, out } => cmd_recalibrate(&io, &landmarks, out.as_deref()),
        Command::Dca {
            io,
            landmark,
            baseline_bundle,
            bootstrap,
            seed,
            out,
        } => cmd_dca(&io, landmark, baseline_bundle.as_deref(), bootstrap, seed, out.as_deref()),
        Command::Robustness { io, deltas, seed, out } => {
            let (bundle, data) = load(&io)?;
            let (draws, _) = thin(&bundle.constrained(), MAX_SERVED_DRAWS);
            let table = jitter_robustness(&draws, &data, &bundle.manifest.model, &LANDMARKS_MIN, &deltas, seed)
                .or_exit(EXIT_DATA)?;
            for row in &table.rows {
                let aucs: Vec<String> = row.auc.iter().map(|a| opt(*a)).collect();
                eprintln!("delta {:>5}  auc {}", row.delta_min, aucs.join(" "));
            }
            emit(&table, out.as_deref())
        }
        Command::Sbc {
            replications,
            n,
            chains,
            warmup,
            draws,
            seed,
            out,
        } => {
            let mut cfg = SbcConfig::new(replications, n, seed);
            cfg.sampler.chains = chains;
            cfg.sampler.warmup = warmup;
            cfg.sampler.draws = draws;
            let report = sbc_run(&cfg).or_exit(EXIT_SAMPLING)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            emit(&report, out.as_deref())
        }
        Command::Serve {
            bundle,
            port,
            host,
            cors_origin,
        } => {
            let state = match bundle {
                None => {
                    eprintln!("warning: no bundle given; prediction endpoints will return 503");
                    AppState::default()
                }
                Some(dir) => {
                    let b = ModelBundle::read(&dir).or_exit(EXIT_DATA)?;
                    AppState::with_model(ServedModel::from_bundle(b).or_exit(EXIT_DATA)?)
                }
            };
            let rt = tokio::runtime::Runtime::new().or_exit(EXIT_DATA)?;
            rt.block_on(serve(state, SocketAddr::new(host, port), cors_origin.as_deref()))
                .or_exit(EXIT_DATA)
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "    NA".to_string(), |x| format!("{x:.4}"))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => write_json(p, value).or_exit(EXIT_DATA),
        None => {
            let s = serde_json::to_string_pretty(value).or_exit(EXIT_DATA)?;
            writeln!(std::io::stdout(), "{s}").or_exit(EXIT_DATA)
        }
    }
}

fn cmd_fit(a: FitArgs) -> Result<(), Failure> {
    let records = read_dataset(&a.data).or_exit(EXIT_DATA)?;
    let (records, tally) = apply_exclusions(records);
    if tally.total() > 0 {
        eprintln!(
            "excluded {} records (cpa {}, catheter {}, missing time {})",
            tally.total(),
            tally.cpa,
            tally.catheter,
            tally.missing_time
        );
    }
    let data = prepare_dataset(&records, a.censor).or_exit(EXIT_DATA)?;
    let sampler_cfg = SamplerConfig {
        chains: a.chains,
        warmup: a.warmup,
        draws: a.draws,
        target_accept: a.target_accept,
        max_treedepth: a.max_treedepth,
        seed: a.seed,
    };
    sampler_cfg.validate().or_exit(EXIT_USAGE)?;
    let out = fit(&data, a.covariates.into(), &sampler_cfg).or_exit(EXIT_SAMPLING)?;
    let mut bundle = ModelBundle::from_fit(&out, &data);
    if data.n_voided() > 0 {
        let (draws, _) = thin(&out.constrained(), MAX_SERVED_DRAWS);
        let curve = cumulative_curve(&draws, &data, &default_grid(data.censor_limit_min), DEFAULT_LEVEL, Normalization::N1)
            .or_exit(EXIT_DATA)?;
        bundle.curve = Some(curve);
    }
    bundle.write(&a.out).or_exit(EXIT_DATA)?;
    let r = &out.report;
    eprintln!(
        "{} draws; max R-hat {:.4}; divergences {}/{}; status {:?}",
        out.draws.total_draws(),
        r.max_rhat(),
        r.divergence_count,
        r.total_transitions,
        r.status
    );
    if r.status == RunStatus::Failed {
        return Err(Failure {
            code: EXIT_SAMPLING,
            error: anyhow::anyhow!("sampling diagnostics FAILED; bundle written to {} for inspection", a.out.display()),
        });
    }
    Ok(())
}

/// Bundle plus the evaluation cohort, standardized like the fitting data.
fn load(io: &EvalIo) -> Result<(ModelBundle, PreparedDataset), Failure> {
    let bundle = ModelBundle::read(&io.bundle).or_exit(EXIT_DATA)?;
    let records = read_dataset(&io.data).or_exit(EXIT_DATA)?;
    let (records, _) = apply_exclusions(records);
    let data = prepare_dataset_with(
        &records,
        bundle.manifest.model.censor_limit_min,
        Some(bundle.standardization()),
    )
    .or_exit(EXIT_DATA)?;
    Ok((bundle, data))
}

fn served_draws(bundle: &ModelBundle) -> Vec<ConstrainedParams> {
    thin(&bundle.constrained(), MAX_SERVED_DRAWS).0
}

#[derive(Serialize)]
struct CalibrationTables {
    t_min: f64,
    deciles: Vec<crate::evaluation::metrics::CalibrationBin>,
    equal_width: Vec<crate::evaluation::metrics::CalibrationBin>,
}

fn cmd_evaluate(io: &EvalIo, out: &Path) -> Result<(), Failure> {
    let (bundle, data) = load(io)?;
    let draws = served_draws(&bundle);
    let cfg = &bundle.manifest.model;
    fs::create_dir_all(out).with_context(|| out.display().to_string()).or_exit(EXIT_DATA)?;

    let curve = cumulative_curve(&draws, &data, &default_grid(cfg.censor_limit_min), DEFAULT_LEVEL, Normalization::N1)
        .or_exit(EXIT_DATA)?;
    let gof = gof_metrics(&curve, cfg.censor_limit_min).or_exit(EXIT_DATA)?;
    let landmarks = landmark_report(&draws, &data, cfg, &LANDMARKS_MIN).or_exit(EXIT_DATA)?;
    let mut tables = Vec::new();
    for &t in &LANDMARKS_MIN {
        let lp = landmark_probabilities(&draws, &data, cfg, t).or_exit(EXIT_DATA)?;
        tables.push(CalibrationTables {
            t_min: t,
            deciles: decile_table(&lp.p_hat, &lp.y).or_exit(EXIT_DATA)?,
            equal_width: equal_width_table(&lp.p_hat, &lp.y).or_exit(EXIT_DATA)?,
        });
    }

    write_json(&out.join("gof.json"), &gof).or_exit(EXIT_DATA)?;
    write_json(&out.join("landmarks.json"), &landmarks).or_exit(EXIT_DATA)?;
    write_json(&out.join("calibration_tables.json"), &tables).or_exit(EXIT_DATA)?;
    let csv_path = out.join("curve.csv");
    let file = fs::File::create(&csv_path).with_context(|| csv_path.display().to_string()).or_exit(EXIT_DATA)?;
    write_curve_csv(std::io::BufWriter::new(file), &curve).or_exit(EXIT_DATA)?;
    write_json(
        &out.join("curve.json"),
        &CurveSidecar {
            level: curve.level,
            n1: curve.n1,
            normalization: curve.normalization,
            dataset_digest: data.digest(),
        },
    )
    .or_exit(EXIT_DATA)?;

    println!("ISE {:.6}  RMSE {:.6}  KS {:.6}  IAE {:.4}  coverage {:.3}", gof.ise, gof.rmse_time, gof.ks, gof.iae, gof.coverage);
    println!("{:>6} {:>6} {:>8} {:>8} {:>8} {:>8}", "t", "n", "AUC", "Brier", "ECE", "slope");
    for m in &landmarks.landmarks {
        println!(
            "{:>6} {:>6} {:>8} {:>8.4} {:>8.4} {:>8}",
            m.t_min,
            m.n_t,
            opt(m.auc),
            m.brier,
            m.ece10,
            opt(m.cal_slope)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RecalibrationRow {
    t_min: f64,
    alpha: f64,
    beta: f64,
    auc_before: f64,
    auc_after: f64,
    brier_before: f64,
    brier_after: f64,
    slope_after: Option<f64>,
    intercept_after: Option<f64>,
}

fn cmd_recalibrate(io: &EvalIo, landmarks: &[f64], out: Option<&Path>) -> Result<(), Failure> {
    let (bundle, data) = load(io)?;
    let draws = served_draws(&bundle);
    let mut rows = Vec::new();
    for &t in landmarks {
        let lp = landmark_probabilities(&draws, &data, &bundle.manifest.model, t).or_exit(EXIT_DATA)?;
        let rc = platt_recalibrate(&lp.p_hat, &lp.y, &lp.p_hat).or_exit(EXIT_DATA)?;
        let after = calibration_fit(&rc.p_star, &lp.y).ok();
        rows.push(RecalibrationRow {
            t_min: t,
            alpha: rc.alpha,
            beta: rc.beta,
            auc_before: auc(&lp.p_hat, &lp.y).or_exit(EXIT_DATA)?,
            auc_after: auc(&rc.p_star, &lp.y).or_exit(EXIT_DATA)?,
            brier_before: brier(&lp.p_hat, &lp.y).or_exit(EXIT_DATA)?,
            brier_after: brier(&rc.p_star, &lp.y).or_exit(EXIT_DATA)?,
            slope_after: after.map(|c| c.slope),
            intercept_after: after.map(|c| c.slope_intercept),
        });
    }
    emit(&rows, out)
}

fn cmd_dca(
    io: &EvalIo,
    landmark: f64,
    baseline: Option<&Path>,
    bootstrap: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let (bundle, data) = load(io)?;
    let lp = landmark_probabilities(&served_draws(&bundle), &data, &bundle.manifest.model, landmark).or_exit(EXIT_DATA)?;
    let base = match baseline {
        None => None,
        Some(dir) => {
            let b = ModelBundle::read(dir).or_exit(EXIT_DATA)?;
            let bdata = prepare_dataset_with(
                &apply_exclusions(read_dataset(&io.data).or_exit(EXIT_DATA)?).0,
                b.manifest.model.censor_limit_min,
                Some(b.standardization()),
            )
            .or_exit(EXIT_DATA)?;
            Some(
                landmark_probabilities(&served_draws(&b), &bdata, &b.manifest.model, landmark)
                    .or_exit(EXIT_DATA)?
                    .p_hat,
            )
        }
    };
    let curve = decision_curve(&lp.p_hat, &lp.y, &default_thresholds(), base.as_deref(), bootstrap, seed);
    emit(&curve, out)
}
