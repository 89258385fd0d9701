//! Exit codes and file outputs of the `ttu` command line.

use std::path::Path;

use ttu_core::bundle::{constant_bundle, ModelBundle};
use ttu_core::cli::{run, EXIT_DATA, EXIT_USAGE};
use ttu_core::data::prepare_dataset;
use ttu_core::diagnostics::RunStatus;
use ttu_core::model::{ConstrainedParams, ModelConfig};
use ttu_core::simulate::{generate_cohort, SimConfig};

fn ttu(args: &[&str]) -> i32 {
    run(std::iter::once("ttu").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(ttu(&["fit", "--bogus"]), EXIT_USAGE);
    assert_eq!(ttu(&["teleport"]), EXIT_USAGE);
    assert_eq!(ttu(&[]), EXIT_USAGE);
    assert_eq!(ttu(&["--help"]), 0);
    assert_eq!(ttu(&["fit", "--help"]), 0);
}

#[test]
fn missing_or_malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    let out = dir.path().join("bundle");
    assert_eq!(ttu(&["fit", "--data", s(&missing), "--out", s(&out)]), EXIT_DATA);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,ttu_raw_min\nx,not-a-number\n").unwrap();
    assert_eq!(ttu(&["fit", "--data", s(&bad), "--out", s(&out)]), EXIT_DATA);

    let cfg = dir.path().join("sim.json");
    std::fs::write(&cfg, r#"{"n": 10, "surprise": true}"#).unwrap();
    assert_eq!(ttu(&["simulate", "--config", s(&cfg), "--out", s(&bad)]), EXIT_DATA);
}

#[test]
fn invalid_sampler_settings_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cohort.csv");
    let cfg = dir.path().join("sim.json");
    std::fs::write(&cfg, serde_json::to_string(&SimConfig::separated(40, 1)).unwrap()).unwrap();
    assert_eq!(ttu(&["simulate", "--config", s(&cfg), "--out", s(&data)]), 0);
    let out = dir.path().join("bundle");
    let args = ["fit", "--data", s(&data), "--out", s(&out), "--target-accept", "1.5"];
    assert_eq!(ttu(&args), EXIT_USAGE);
}

#[test]
fn serve_refuses_a_failed_bundle() {
    let recs = generate_cohort(&SimConfig::separated(30, 2)).unwrap();
    let data = prepare_dataset(&recs, 300.0).unwrap();
    let cfg = ModelConfig::from_dataset(&data);
    let mut bundle = constant_bundle(&ConstrainedParams::symmetric(0.4, 150.0, 40.0), cfg, &data, 2, 20);
    bundle.diagnostics.status = RunStatus::Failed;
    let dir = tempfile::tempdir().unwrap();
    bundle.write(dir.path()).unwrap();
    assert_eq!(ttu(&["serve", "--bundle", s(dir.path()), "--port", "0"]), EXIT_DATA);
}

#[test]
fn simulate_then_fit_writes_a_readable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    let data = dir.path().join("cohort.csv");
    let out = dir.path().join("bundle");
    std::fs::write(&cfg, serde_json::to_string(&SimConfig::separated(300, 5)).unwrap()).unwrap();
    assert_eq!(ttu(&["simulate", "--config", s(&cfg), "--out", s(&data)]), 0);
    let again = dir.path().join("again.csv");
    assert_eq!(ttu(&["simulate", "--config", s(&cfg), "--out", s(&again)]), 0);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());

    let code = ttu(&[
        "fit", "--data", s(&data), "--out", s(&out), "--chains", "2", "--warmup", "400", "--draws", "400",
        "--seed", "3",
    ]);
    assert_eq!(code, 0);
    let bundle = ModelBundle::read(&out).unwrap();
    assert_eq!(bundle.constrained().len(), 800);
    assert_eq!(bundle.manifest.sampler.seed, 3);
    assert!(bundle.curve.is_some());
    assert_ne!(bundle.diagnostics.status, RunStatus::Failed);
}
