use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bracketflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn version_flag() {
    let out = bin(&["--version"]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        format!("bracketflow {}", env!("CARGO_PKG_VERSION"))
    );
}

#[test]
fn run_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"name": "small", "generator": "toda", "dimension": 3, "h0_recipe": "paper_standard",
            "t_end": 2.0, "residual_columns": true}"#,
    );
    let out_dir = dir.path().join("out");
    let out = bin(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "t,h_0_0,h_1_1,h_2_2,offdiag_norm,hs_norm,unitarity_drift,triangularity_drift"
    );
    assert_eq!(csv.lines().count(), 1 + 41);
    let first = csv.lines().nth(1).unwrap();
    assert!(first.starts_with("0.0000000000000000e0,"));
    assert!(!first.ends_with(','), "toda runs carry factor drift: {first}");
    assert!(out_dir.join("residual_columns.csv").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["code_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config"]["name"], "small");
    assert_eq!(manifest["summary"]["assumption_check"]["status"], "checked");
}

#[test]
fn wegner_manifest_marks_assumptions_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"name": "w", "generator": "wegner", "dimension": 3, "h0_recipe": "paper_standard", "t_end": 3.0}"#,
    );
    let out_dir = dir.path().join("out");
    assert!(bin(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["summary"]["assumption_check"]["status"], "not_applicable");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"name": "x", "generator": "toda", "dimension": 3, "h0_recipe": "explicit"}"#,
        r#"{"name": "x", "generator": "toda", "dimension": 3, "h0_recipe": "paper_standard", "typo": 1}"#,
        r#"{"name": "x", "generator": "toda", "dimension": 3, "h0_recipe": "paper_standard", "rel_tol": -1}"#,
        "{ not json",
    ];
    for body in cases {
        let config = write_config(dir.path(), body);
        let out = bin(&["run", "--config", &config, "--out", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{body}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
    }
    let out = bin(&["run", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"name": "blowup", "generator": "wegner", "dimension": 2, "h0_recipe": "explicit",
            "h0": [[1e110, 1e110], [1e110, -1e110]], "t_end": 1.0}"#,
    );
    let out = bin(&["run", "--config", &config, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reproduce_passes_and_rejects_unknown_figures() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["reproduce", "brockett-fig1", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("PASS final_diagonal")));
    assert!(!stdout.contains("FAIL"));

    let out = bin(&["reproduce", "fig7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hs_study_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&[
        "hs-study", "--beta", "0.5", "--sizes", "6,8", "--generator", "toda", "--t-end", "60",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("hs_study.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "n,alpha_0,alpha_1,alpha_2,alpha_3,alpha_4,hs_norm,gap_from_previous");
    assert_eq!(csv.lines().count(), 3);

    let out = bin(&["hs-study", "--beta", "1.5", "--sizes", "6,8"]);
    assert_eq!(out.status.code(), Some(2));
}
