use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_anisoperc");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("ANISOPERC_OUT")
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("m.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
[lattice]
d = 2
s = 1
side_d = 8
side_s = 4
boundary = "periodic"

[params]
p = [0.3]
q = [0.1]

[seeds]
master = 5
replicas = 10
"#;

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn sample_rows_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let m = manifest(tmp.path(), SMALL);
    let m = m.to_str().unwrap();
    let a = run(&["sample", "--manifest", m, "--out", "a"], tmp.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = read(tmp.path().join("a/sample.csv"));
    assert_eq!(csv.lines().count(), 11);
    let b = run(&["sample", "--manifest", m, "--out", "b", "--workers", "3"], tmp.path());
    assert!(b.status.success());
    for f in ["sample.csv", "manifest.toml"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert!(tmp.path().join("a/timing.json").exists());
    let c = run(&["sample", "--manifest", m, "--out", "c", "--seed", "6"], tmp.path());
    assert!(c.status.success());
    assert_ne!(read(tmp.path().join("a/sample.csv")), read(tmp.path().join("c/sample.csv")));
}

#[test]
fn sample_grid_accounting() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL.replace("p = [0.3]\nq = [0.1]", "p = [0.3, 0.4]\nq = [0.1, 0.2]");
    let m = manifest(tmp.path(), &body);
    let out = run(&["sample", "--manifest", m.to_str().unwrap(), "--out", "o"], tmp.path());
    assert!(out.status.success());
    let csv = read(tmp.path().join("o/sample.csv"));
    let mut groups = std::collections::BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *groups.entry((f[2].to_string(), f[3].to_string())).or_insert(0) += 1;
    }
    assert_eq!(groups.len(), 4);
    assert!(groups.values().all(|&n| n == 10));
}

#[test]
fn golden_headers() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL.replace("side_s = 4", "side_s = 40").replace("boundary = \"periodic\"", "");
    let m = manifest(tmp.path(), &body);
    let m = m.to_str().unwrap();
    assert!(run(&["sample", "--manifest", m, "--out", "o"], tmp.path()).status.success());
    assert!(run(&["explore", "--manifest", m, "--out", "o"], tmp.path()).status.success());
    assert!(run(&["check", "--out", "o"], tmp.path()).status.success());
    let head = |f: &str| read(tmp.path().join("o").join(f)).lines().next().unwrap().to_string();
    assert_eq!(
        head("sample.csv"),
        "schema,manifest_sha256,p,q,replica,stream,origin_size,max_size,components,spans"
    );
    assert_eq!(
        head("explore.csv"),
        "schema,manifest_sha256,p,q,replica,outcome,steps,accepted,rejected,hooks,max_layer,trace_ok,first_violation"
    );
    assert_eq!(
        head("explore_summary.csv"),
        "schema,manifest_sha256,p,q,qbar,r,runs,died,reached_boundary,budget_exhausted,window_exhausted,steps,eta_fraction,trace_failures"
    );
    assert_eq!(head("check.csv"), "schema,check,d,m,p,q,p_c,lhs,rhs,holds");
    assert!(read(tmp.path().join("o/sample.csv")).lines().nth(1).unwrap().starts_with("sample.v1,"));
}

#[test]
fn explore_smoke_runs() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL
        .replace("p = [0.3]\nq = [0.1]", "p = [0.0, 1.0]\nq = [0.0, 1.0]")
        .replace("side_s = 4", "side_s = 64")
        .replace("boundary = \"periodic\"", "")
        + "\n[explore]\nstep_budget = 60\n";
    let m = manifest(tmp.path(), &body);
    let out = run(&["explore", "--manifest", m.to_str().unwrap(), "--out", "o", "--trace"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read(tmp.path().join("o/explore_summary.csv"));
    let rows: Vec<Vec<String>> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    // All closed: every run dies with nothing accepted.
    assert_eq!(rows[0][7], "10");
    assert_eq!(rows[0][12], "0.0");
    // All open: every run reaches the boundary on accepted edges only.
    assert_eq!(rows[3][8], "10");
    assert_eq!(rows[3][12], "1.0");
    assert!(rows.iter().all(|r| r[13] == "0"));
    let trace = read(tmp.path().join("o/explore_trace.jsonl"));
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "coupling-trace");
    assert_eq!(first["payload"]["step"]["n"], 1);
}

#[test]
fn explore_refuses_s_other_than_one() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL.replace("s = 1", "s = 2");
    let m = manifest(tmp.path(), &body);
    let out = run(&["explore", "--manifest", m.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lattice.s"));
}

#[test]
fn invalid_manifest_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let m = manifest(tmp.path(), &SMALL.replace("replicas = 10", "replicas = -1"));
    let out = run(&["sample", "--manifest", m.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds.replicas"));
    let m = manifest(tmp.path(), &SMALL.replace("side_d = 8", "side_d = 1"));
    let out = run(&["sample", "--manifest", m.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lattice.side_d"));
    let out = run(&["sample", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn qc_scan_edge_cases() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL
        .replace("p = [0.3]", "p = []")
        .replace("side_s = 4", "side_s = 6")
        .replace("boundary = \"periodic\"", "")
        + "\n[estimator]\nsurrogate = { kind = \"spanning\", axis = 2 }\nn_per_probe = 40\nmax_per_probe = 80\ntol = 0.01\n";
    let m = manifest(tmp.path(), &body);
    let out = run(&["qc-scan", "--manifest", m.to_str().unwrap(), "--out", "empty"], tmp.path());
    assert!(out.status.success());
    let csv = read(tmp.path().join("empty/qc_scan.csv"));
    assert_eq!(
        csv,
        "schema,manifest_sha256,p,pc_minus_p,qc,qc_lo,qc_hi,bound_line,bound_vacuous,bound_holds,ratio,monotone_ok,side,samples,method,surrogate,flag\n"
    );

    let m = manifest(tmp.path(), &body.replace("p = []", "p = [0.3, 0.55]"));
    let out = run(&["qc-scan", "--manifest", m.to_str().unwrap(), "--out", "two"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(tmp.path().join("two/qc_scan.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].ends_with(",bisection,spanning_axis2,"));
    assert!(rows[1].ends_with("p_not_below_pc"));
    assert_eq!(read(tmp.path().join("two/qc_scan.jsonl")).lines().count(), 1);
}

fn write_curve(dir: &Path, name: &str, rows: &[(f64, f64)]) -> PathBuf {
    let mut body = String::from("p,qc\n");
    for (p, q) in rows {
        body += &format!("{p},{q}\n");
    }
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn fit_psi(dir: &Path, out: &str) -> f64 {
    let csv = read(dir.join(out).join("fit.csv"));
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    row[3].parse().unwrap()
}

#[test]
fn fit_synthetic_curves() {
    let tmp = TempDir::new().unwrap();
    let ps = [0.40, 0.42, 0.44, 0.46, 0.48];
    let square: Vec<(f64, f64)> = ps.iter().map(|&p| (p, 0.7 * (0.5f64 - p).powi(2))).collect();
    let path = write_curve(tmp.path(), "sq.csv", &square);
    let out = run(&["fit", "--curve", path.to_str().unwrap(), "--pc", "0.5", "--out", "sq"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!((fit_psi(tmp.path(), "sq") - 2.0).abs() < 1e-9);
    assert_eq!(read(tmp.path().join("sq/fit_residuals.csv")).lines().count(), 6);

    let linear: Vec<(f64, f64)> = ps.iter().map(|&p| (p, 3.0 * (0.5 - p))).collect();
    let path = write_curve(tmp.path(), "lin.csv", &linear);
    assert!(run(&["fit", "--curve", path.to_str().unwrap(), "--pc", "0.5", "--out", "lin"], tmp.path()).status.success());
    assert!((fit_psi(tmp.path(), "lin") - 1.0).abs() < 1e-9);

    let path = write_curve(tmp.path(), "short.csv", &linear[..2]);
    let out = run(&["fit", "--curve", path.to_str().unwrap(), "--pc", "0.5", "--out", "short"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("3"));

    let out = run(&["fit", "--curve", path.to_str().unwrap(), "--out", "nopc"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_passes_and_bad_pc_fails() {
    let tmp = TempDir::new().unwrap();
    let ok = run(&["check", "--out", "ok"], tmp.path());
    assert_eq!(ok.status.code(), Some(0));
    let csv = read(tmp.path().join("ok/check.csv"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    let bad = run(&["check", "--pc", "0.99", "--out", "bad"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.lines().filter(|l| l.starts_with("FAIL chain_")).count() > 1);
}

#[test]
fn equivalence_command() {
    let tmp = TempDir::new().unwrap();
    let body = r#"
[lattice]
d = 1
s = 1
side_d = 2
side_s = 2

[params]
p = [0.5]
q = [0.3]

[seeds]
master = 1
replicas = 100000
"#;
    let m = manifest(tmp.path(), body);
    let out = run(&["equivalence", "--manifest", m.to_str().unwrap(), "--out", "o"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(tmp.path().join("o/equivalence.csv"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",true"));
}

#[test]
fn output_directory_precedence() {
    let tmp = TempDir::new().unwrap();
    let m = manifest(tmp.path(), SMALL);
    let m = m.to_str().unwrap();
    let env_run = |extra: &[&str]| {
        let mut args = vec!["sample", "--manifest", m];
        args.extend_from_slice(extra);
        Command::new(BIN)
            .args(&args)
            .current_dir(tmp.path())
            .env("ANISOPERC_OUT", "from_env")
            .output()
            .unwrap()
    };
    assert!(env_run(&[]).status.success());
    assert!(tmp.path().join("from_env/sample.csv").exists());
    assert!(env_run(&["--out", "from_flag"]).status.success());
    assert!(tmp.path().join("from_flag/sample.csv").exists());
    let with_dir = manifest(tmp.path(), &format!("{SMALL}\n[output]\ndir = \"from_manifest\"\n"));
    let out = Command::new(BIN)
        .args(["sample", "--manifest", with_dir.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("ANISOPERC_OUT", "from_env2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("from_manifest/sample.csv").exists());
    assert!(!tmp.path().join("from_env2").exists());
}

#[test]
fn readme_manifest_parses() {
    let readme = include_str!("../../../README.md");
    let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let m = anisoperc_cli::manifest::ExperimentManifest::parse(block).unwrap();
    assert_eq!(m.grid().unwrap().len(), 3);
    m.spec().unwrap();
}
