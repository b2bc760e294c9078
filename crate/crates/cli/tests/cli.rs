use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn heatflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatflow"))
        .args(args)
        .env("HEATFLOW_OUT", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn invariant<'a>(r: &'a Value, name: &str) -> &'a Value {
    r["invariants"].as_array().unwrap().iter().find(|v| v["name"] == name).unwrap_or_else(|| panic!("{name} missing"))
}

const GAUSSIAN: &str = r#"{"id": "g", "seed": 5,
  "scenario": {"kind": "gaussian", "dim": 2, "a": [2, 0, 0, 0.5], "b": [1, 0, 0, 3]}}"#;

const IDENTITY_FLOW: &str = r#"{"id": "id-flow",
  "scenario": {"kind": "flow",
    "u": {"dim_e0": 1, "quad_matrix": [1.0]}, "v": {"kind": "zero"},
    "grid": {"extent": 6.0, "h": 0.02}, "dt": 0.02, "window": [3.0],
    "seeds": {"lo": -2, "hi": 2, "count": 21}, "forward": {"lo": -1, "hi": 1, "count": 5}}}"#;

#[test]
fn gaussian_commuting_pair_recovers_brenier_map() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), GAUSSIAN);
    let out = heatflow(&["run", "--config", &cfg], &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&tmp.path().join("out/g"));
    let rec = invariant(&r, "commuting_recovery");
    assert!(rec["value"].as_f64().unwrap() <= 1e-6);
    assert_eq!(rec["passed"], true);
    assert!(tmp.path().join("out/g/trajectory.csv").exists());
}

#[test]
fn zero_perturbation_flow_is_the_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), IDENTITY_FLOW);
    let out = heatflow(&["run", "--config", &cfg], &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&tmp.path().join("out/id-flow"));
    assert_eq!(r["metrics"]["max_displacement"], 0.0);
    for name in ["round_trip", "pushforward_residual", "escaped_seeds"] {
        assert_eq!(invariant(&r, name)["value"], 0.0, "{name}");
    }
}

#[test]
fn malformed_configs_exit_two_without_output() {
    let bad = [
        "{ not json",
        r#"{"id": "x", "scenario": {"kind": "gaussian", "dim": 2, "a": [1, 0, 0, 1], "b": [1, 0, 0, 1], "colour": 1}}"#,
        r#"{"id": "x", "scenario": {"kind": "gaussian", "dim": 2, "a": [1, 0, 0, 1], "b": [1, 0, 0, 1], "tolerances": {"invariant": -1}}}"#,
        r#"{"id": "x", "scenario": {"kind": "teleport"}}"#,
        r#"{"id": "../escape", "scenario": {"kind": "brenier1d", "rho": {"name": "quadratic"}, "v": {"name": "quadratic"}, "dim": 2}}"#,
        r#"[{"id": "a", "scenario": {"kind": "acceptance-suite", "criteria": [12]}}]"#,
    ];
    for body in bad {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_config(tmp.path(), body);
        let out_dir = tmp.path().join("out");
        let out = heatflow(&["run", "--config", &cfg], &out_dir);
        assert_eq!(out.status.code(), Some(2), "{body}");
        assert!(!out_dir.exists(), "partial output for {body}");
        let v = heatflow(&["validate-config", "--config", &cfg], &out_dir);
        assert_eq!(v.status.code(), Some(2));
    }
}

#[test]
fn tightened_tolerance_fails_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), GAUSSIAN);
    let out = heatflow(&["run", "--config", &cfg, "--tolerance-scale", "1e-12"], &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let r = report(&tmp.path().join("out/g"));
    assert_eq!(invariant(&r, "matrix_flow_invariant")["passed"], false);
}

#[test]
fn numerical_abort_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"id": "abort", "scenario": {"kind": "semigroup",
          "u": {"dim_e0": 1, "quad_matrix": [400.0]}, "v": {"kind": "quadratic", "matrix": [1.0]},
          "grid": {"extent": 4.0, "h": 0.01}, "dt": 1.0, "horizon": 4.0, "times": [1.0]}}"#,
    );
    let out = heatflow(&["run", "--config", &cfg], &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical"));
}

#[test]
fn repeated_runs_give_identical_csv() {
    let body = format!(
        "[{GAUSSIAN}, {IDENTITY_FLOW}, {}]",
        r#"{"id": "corr", "seed": 9, "scenario": {"kind": "correlation", "n": 20000, "shipped": ["logcosh-blocks", "independent-slabs"]}}"#
    );
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &body);
    for run in ["a", "b"] {
        let out = heatflow(&["run", "--config", &cfg, "--parallel", "--out", &tmp.path().join(run).to_string_lossy()], tmp.path());
        assert!(out.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["g/metrics.csv", "g/invariants.csv", "id-flow/map.csv", "corr/correlation.csv", "corr/invariants.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn seed_flag_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), GAUSSIAN);
    heatflow(&["run", "--config", &cfg, "--seed", "42"], &tmp.path().join("out"));
    assert_eq!(report(&tmp.path().join("out/g"))["seed"], 42);
}

#[test]
fn injected_acceptance_failure_is_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = heatflow(&["acceptance", "--criterion", "1", "--criterion", "3", "--inject", "3=1e-9"], &out_dir);
    assert_eq!(out.status.code(), Some(1));
    let csv = std::fs::read_to_string(out_dir.join("acceptance/acceptance.csv")).unwrap();
    let verdicts: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(verdicts, ["pass", "fail"]);
    assert!(out_dir.join("acceptance/acceptance.json").exists());

    let clean = heatflow(&["acceptance", "--criterion", "1", "--criterion", "3", "--out", &tmp.path().join("clean").to_string_lossy()], &out_dir);
    assert_eq!(clean.status.code(), Some(0));
    let a = std::fs::read(tmp.path().join("clean/acceptance/acceptance.csv")).unwrap();
    heatflow(&["acceptance", "--criterion", "1", "--criterion", "3", "--out", &tmp.path().join("again").to_string_lossy()], &out_dir);
    let b = std::fs::read(tmp.path().join("again/acceptance/acceptance.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn list_scenarios_names_every_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = heatflow(&["list-scenarios"], tmp.path());
    let text = String::from_utf8_lossy(&out.stdout);
    for kind in ["semigroup", "flow", "brenier1d", "gaussian", "correlation", "acceptance-suite", "mixed-e0-radial"] {
        assert!(text.contains(kind), "{kind}");
    }
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let out = heatflow(&["validate-config", "--config", &path.to_string_lossy()], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{}", path.display());
    }
}
