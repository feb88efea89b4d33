use std::process::Command;

fn qoip() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qoip"))
}

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p1.csv");
    let status = qoip()
        .args(["run", "--problem", "poisson", "--variant", "sip", "--p", "1", "--eta", "10"])
        .args(["--load", "ms-p1", "--mesh", "builtin:square:2", "--levels", "2", "--max-ratio", "1.5"])
        .arg("--out")
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("level,h,dofs,energy_error,best_error,ratio,eoc"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn run_json_for_elasticity() {
    let out = qoip()
        .args(["run", "--problem", "elasticity", "--lambda", "1000", "--levels", "1", "--format", "json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["levels"].as_array().unwrap().len(), 2);
    assert_eq!(v["method"]["problem"], "elasticity");
    assert!(v["levels"][0]["solve"]["residual"].as_f64().unwrap() < 1e-10);
}

#[test]
fn failed_assertion_sets_exit_code() {
    let status = qoip()
        .args(["run", "--p", "1", "--levels", "1", "--min-eoc", "5"])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn classical_rhs_with_kink_load_is_rejected() {
    let out = qoip()
        .args(["run", "--p", "3", "--load", "ms-p2", "--smoother", "identity", "--mesh", "builtin:square:2", "--levels", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("undefined pairing"));
}

#[test]
fn check_smoothers_reports_bubble_constant() {
    let out = qoip().args(["check-smoothers", "--samples", "3"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("630"));
    assert!(text.contains("all smoother checks passed"));
}

#[test]
fn eta_star_prints_a_number() {
    let out = qoip().args(["eta-star", "--p", "1"]).output().unwrap();
    assert!(out.status.success());
    let v: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(v > 0.0 && v.is_finite());
}

#[test]
fn compare_variants_table() {
    let out = qoip().args(["compare-variants", "--levels", "2", "--min-eoc", "0.5"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("level,h,dofs,difference,eoc"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn mesh_file_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.mesh");
    std::fs::write(&path, "4 2\n0 0\n1 0\n1 1\n0 1\n0 1 2\n0 2 3\n").unwrap();
    let out = qoip().args(["eta-star", "--mesh"]).arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bad = qoip().args(["eta-star", "--mesh", "/nonexistent/file"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
