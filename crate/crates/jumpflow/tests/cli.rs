//! End-to-end checks of the command-line interface: file outputs, exit
//! codes, and bit-exact reproducibility from the echoed config.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jumpflow"))
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("missing {name}: {e}"))
}

#[test]
fn scenario_list_prints_registry() {
    let out = bin().args(["scenario", "list"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "pure-drift",
        "compound-poisson",
        "ou-jump",
        "rough-drift",
        "two-sided-jumps",
    ] {
        assert!(text.contains(name), "missing {name} in: {text}");
    }
}

#[test]
fn simulate_writes_outputs_and_reproduces_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("run1");
    let d2 = dir.path().join("run2");
    let args = |out: &Path| {
        vec![
            "simulate".to_string(),
            "--scenario".into(),
            "compound-poisson".into(),
            "--n".into(),
            "500".into(),
            "--steps".into(),
            "50".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let s1 = bin().args(args(&d1)).status().unwrap();
    let s2 = bin().args(args(&d2)).status().unwrap();
    assert!(s1.success() && s2.success());

    let summary: serde_json::Value = serde_json::from_str(&read(&d1, "summary.json")).unwrap();
    assert_eq!(summary["n_paths"], 500);
    assert_eq!(summary["seed"], 7);
    assert!(summary.get("epsilon").is_none());
    assert_eq!(read(&d1, "ensemble.csv"), read(&d2, "ensemble.csv"));

    // Rerun from the echoed config: byte-identical CSV again.
    let d3 = dir.path().join("run3");
    let s3 = bin()
        .args([
            "simulate",
            "--config",
            d1.join("config.echo.json").to_str().unwrap(),
            "--out",
            d3.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(s3.success());
    assert_eq!(read(&d1, "ensemble.csv"), read(&d3, "ensemble.csv"));
}

#[test]
fn simulate_with_epsilon_records_it_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "simulate",
            "--scenario",
            "compound-poisson",
            "--n",
            "200",
            "--steps",
            "20",
            "--epsilon",
            "0.1",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "summary.json")).unwrap();
    assert_eq!(summary["epsilon"], 0.1);
}

#[test]
fn verify_exact_flow_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good");
    let status = bin()
        .args([
            "verify",
            "--scenario",
            "pure-drift",
            "--steps",
            "200",
            "--out",
            good.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = read(&good, "residuals.csv");
    assert!(csv.lines().count() > 10);
    assert!(!csv.contains(",fail"));

    let bad = dir.path().join("bad");
    let status = bin()
        .args([
            "verify",
            "--scenario",
            "pure-drift",
            "--steps",
            "200",
            "--negative-control",
            "double-drift",
            "--out",
            bad.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    assert!(read(&bad, "residuals.csv").contains(",fail"));
}

#[test]
fn verify_growth_probe_emits_report() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "verify",
            "--scenario",
            "pure-drift",
            "--steps",
            "100",
            "--probe",
            "growth",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "growth.json")).unwrap();
    assert!(report["constant_estimate"].as_f64().unwrap() > 0.0);
}

#[test]
fn chain_runs_per_epsilon_and_requires_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "chain",
            "--scenario",
            "compound-poisson",
            "--steps",
            "50",
            "--n",
            "4000",
            "--epsilons",
            "0.5,0.1",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = read(dir.path(), "chain.csv");
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("0.500000") && csv.contains("0.100000"));

    // Missing --epsilons is a usage error.
    let status = bin()
        .args([
            "chain",
            "--scenario",
            "compound-poisson",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn fp_solve_writes_density_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "fp-solve",
            "--scenario",
            "compound-poisson",
            "--t-end",
            "1",
            "--l",
            "20",
            "--m",
            "800",
            "--fp-dt",
            "1e-3",
            "--times",
            "0.5,1.0",
            "--svg",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = read(dir.path(), "fp_t1.0000.csv");
    assert!(csv.starts_with("cell_center,density"));
    assert!(dir.path().join("fp_t0.5000.csv").exists());
    assert!(dir.path().join("fp_t1.0000.svg").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown scenario.
    let status = bin()
        .args([
            "simulate",
            "--scenario",
            "bogus",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // Unstable fp step.
    let status = bin()
        .args([
            "fp-solve",
            "--scenario",
            "ou-jump",
            "--fp-dt",
            "0.1",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
