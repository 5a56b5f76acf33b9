use std::path::Path;
use std::process::{Command, Output};

use flowrde::config::{FieldSpec, RunConfig};
use flowrde::error::CliError;
use flowrde::output::read_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowrde"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn constant_config() -> RunConfig {
    RunConfig {
        hurst: 0.4,
        grid_level: 7,
        eps: 1.0 / 16.0,
        field: FieldSpec::Constant { n: 1, m: 1, value: vec![2.0] },
        u0: vec![0.5],
        seeds: vec![3],
        ..RunConfig::default()
    }
}

fn solve(dir: &Path, cfg: &RunConfig) -> Output {
    let config = write_config(dir, cfg);
    bin().args(["solve", "--config"]).arg(&config).arg("--out").arg(dir.join("out")).env_remove("FLOWRDE_SEED").output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn constant_field_report_has_negligible_oracle_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = solve(dir.path(), &constant_config());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert!(report["result"]["oracle_gap"].as_f64().unwrap() <= 1e-6);
    assert_eq!(report["config"]["grid_level"], 7);
    assert_eq!(report["input_hash"].as_str().unwrap().len(), 64);
    let (cols, rows) = read_csv(&dir.path().join("out/u.csv")).unwrap();
    assert_eq!(cols, ["t", "u0"]);
    assert_eq!(rows.len(), 129);
    let text = std::fs::read_to_string(dir.path().join("out/oracle.csv")).unwrap();
    assert!(text.starts_with("# config: {"));
}

#[test]
fn too_small_eps_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { eps: 1.0 / 256.0, ..constant_config() };
    let out = solve(dir.path(), &cfg);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["exit_code"], 2);
    assert!(err["error"]["message"].as_str().unwrap().contains("4*2^-grid_level"), "{err}");
}

#[test]
fn unknown_fields_and_versions_are_rejected() {
    let mut v = serde_json::to_value(constant_config()).unwrap();
    v["schema_version"] = 9.into();
    let e = RunConfig::parse(&v.to_string()).and_then(RunConfig::resolve).unwrap_err();
    assert!(matches!(e, CliError::Config(_)) && e.exit_code() == 2);
    v["schema_version"] = 1.into();
    v["typo"] = 1.into();
    assert!(RunConfig::parse(&v.to_string()).is_err());
}

#[test]
fn repeated_solves_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { field: FieldSpec::sine_shift(), u0: vec![0.1], amplitude: 0.5, ..constant_config() };
    let read = |p: &Path| std::fs::read_to_string(p.join("out/report.json")).unwrap();
    assert!(solve(dir.path(), &cfg).status.success());
    let first = read(dir.path());
    assert!(solve(dir.path(), &cfg).status.success());
    assert_eq!(first, read(dir.path()));
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &constant_config());
    let run = |seed: &str, out: &str| {
        let o = bin().args(["solve", "--config"]).arg(&config).arg("--out").arg(dir.path().join(out)).env("FLOWRDE_SEED", seed).output().unwrap();
        assert!(o.status.success());
        serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(dir.path().join(out).join("report.json")).unwrap()).unwrap()
    };
    let r = run("42", "a");
    assert_eq!(r["config"]["seeds"], serde_json::json!([42]));
    let bad = bin().args(["solve", "--config"]).arg(&config).env("FLOWRDE_SEED", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn unknown_suite_exits_with_usage_code() {
    let out = bin().args(["verify", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trees_lists_the_truncation_set() {
    let out = bin().args(["trees", "--hurst", "0.3"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let table: Vec<&str> = text.lines().skip(2).take_while(|l| !l.is_empty()).collect();
    assert_eq!(table.len(), 4, "{text}");
    assert!(table[0].starts_with("()") && table[0].ends_with("-0.700"));
    assert!(text.contains("(): empty"));
}

#[test]
fn counterterm_command_reports_slope() {
    let out = bin().args(["counterterm", "--hurst", "0.3", "--eps", "0.001", "--s", "0.5,0.25,0.125,0.0625"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let slope = v["result"]["slope"].as_f64().unwrap();
    assert!((slope + 0.4).abs() < 0.2, "{slope}");
    let bad = bin().args(["counterterm", "--hurst", "0.7", "--eps", "0.01", "--s", "0.5"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn counterterm_suite_at_one_hurst_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["verify", "counterterm", "--hurst", "0.3", "--seeds", "4", "--out"])
        .arg(dir.path())
        .env_remove("FLOWRDE_SEED")
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("PASS H=0.3 counterterm slope")), "{text}");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["hursts"], serde_json::json!([0.3]));
    assert!(summary["result"]["criteria"].as_array().unwrap().iter().any(|c| c["name"] == "H=0.3 counterterm slope"));
    let points = std::fs::read_to_string(dir.path().join("points.csv")).unwrap();
    assert!(points.contains("series,scale,value"));
}

#[test]
fn sample_writes_all_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { field: FieldSpec::Constant { n: 1, m: 2, value: vec![1.0, 0.0] }, ..constant_config() };
    let config = write_config(dir.path(), &cfg);
    let path = dir.path().join("s.csv");
    let out = bin().args(["sample", "--config"]).arg(&config).arg("--out").arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (cols, rows) = read_csv(&path).unwrap();
    assert_eq!(cols, ["t", "w0", "w1", "w_eps0", "w_eps1", "xi_eps0", "xi_eps1"]);
    assert_eq!(rows[0][1], 0.0);
}
