use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_lasso-ate");

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SOURCE_DATE_EPOCH").env_remove("LASSO_ATE_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const META: &str = r#"{"outcome":"y","treatment":"t"}"#;

/// n = 8, one covariate with identical means in both arms.
fn toy(dir: &Path) -> (PathBuf, PathBuf) {
    let csv = "y,t,x\n3,1,1\n5,1,-1\n4,1,2\n8,1,-2\n1,0,1\n2,0,-1\n0,0,2\n1,0,-2\n";
    (write(dir, "toy.csv", csv), write(dir, "toy.json", META))
}

/// Deterministic pseudo-random experiment with a sparse linear signal.
fn experiment(dir: &Path, n: usize, p: usize) -> (PathBuf, PathBuf) {
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut body = String::from("y,t");
    for j in 0..p {
        body.push_str(&format!(",x{j}"));
    }
    body.push('\n');
    for i in 0..n {
        let x: Vec<f64> = (0..p).map(|_| 2.0 * next()).collect();
        let t = i % 2;
        let y = t as f64 + 2.0 * x[0] - x[1] + 0.5 * next();
        body.push_str(&format!("{y},{t}"));
        for v in x {
            body.push_str(&format!(",{v}"));
        }
        body.push('\n');
    }
    (write(dir, "exp.csv", &body), write(dir, "exp.json", META))
}

fn strip_timestamps(mut v: Value) -> Value {
    if let Some(m) = v.get_mut("manifest").and_then(Value::as_object_mut) {
        m.remove("timestamp");
    }
    v
}

#[test]
fn unadjusted_matches_difference_of_means() {
    let dir = TempDir::new().unwrap();
    let (data, meta) = toy(dir.path());
    let v = json(&run(&["estimate", s(&data), s(&meta), "--methods", "unadjusted"], &[]));
    let r = &v["reports"][0];
    assert_eq!(r["method"], "unadjusted");
    assert!((r["estimate"].as_f64().unwrap() - (5.0 - 1.0)).abs() < 1e-12);
    assert_eq!(v["manifest"]["command"], "estimate");
    assert_eq!(v["manifest"]["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn pinned_large_penalty_reverts_to_unadjusted() {
    let dir = TempDir::new().unwrap();
    let (data, meta) = experiment(dir.path(), 40, 3);
    let v = json(&run(
        &["estimate", s(&data), s(&meta), "--methods", "unadjusted,cv_lasso", "--lambda", "1e6", "--folds", "4"],
        &[],
    ));
    let (u, l) = (&v["reports"][0], &v["reports"][1]);
    assert_eq!(l["method"], "cv_lasso");
    assert_eq!(u["estimate"], l["estimate"]);
    assert_eq!(l["selected_treated"], 0);
}

#[test]
fn estimate_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let (data, meta) = experiment(dir.path(), 60, 8);
    let args = ["estimate", s(&data), s(&meta), "--seed", "11", "--emit-cv", "--folds", "5"];
    let a = run(&args, &[]);
    let b = run(&args, &[]);
    assert_eq!(strip_timestamps(json(&a)), strip_timestamps(json(&b)));
    let fixed = [("SOURCE_DATE_EPOCH", "1700000000")];
    let c = run(&args, &fixed);
    let d = run(&args, &fixed);
    assert!(c.status.success());
    assert_eq!(c.stdout, d.stdout);
    let v = json(&c);
    assert_eq!(v["manifest"]["timestamp"], "2023-11-14T22:13:20Z");
    assert_eq!(v["cv"].as_array().unwrap().len(), 2);
}

#[test]
fn ols_infeasible_is_a_computation_error() {
    let dir = TempDir::new().unwrap();
    let (data, meta) = experiment(dir.path(), 20, 12);
    let out = run(&["estimate", s(&data), s(&meta), "--methods", "unadjusted,ols"], &[]);
    assert_eq!(out.status.code(), Some(3));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 1);
    assert_eq!(v["failures"][0]["method"], "ols");
    assert!(String::from_utf8_lossy(&out.stderr).contains("Lasso"));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let (data, _) = toy(dir.path());
    let bad_meta = write(dir.path(), "bad.json", r#"{"outcome":"z","treatment":"t"}"#);
    assert_eq!(run(&["estimate", s(&data), s(&bad_meta)], &[]).status.code(), Some(2));
    let ragged = write(dir.path(), "ragged.csv", "y,t,x\n1,1\n");
    let meta = write(dir.path(), "m.json", META);
    assert_eq!(run(&["estimate", s(&ragged), s(&meta)], &[]).status.code(), Some(2));
    let missing = dir.path().join("missing.csv");
    assert_eq!(run(&["estimate", s(&missing), s(&meta)], &[]).status.code(), Some(2));
    assert_eq!(run(&["estimate", s(&data), s(&meta), "--methods", "ridge"], &[]).status.code(), Some(2));
}

const SIM: &str = "n = 60\np = 6\ns = 3\nrho = 0.2\nn_A = 30\nreplications = REPS\nfolds = 5\nn_lambda = 20\nbootstrap = 20\n";

#[test]
fn simulate_single_replication() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "one.toml", &SIM.replace("REPS", "1"));
    let csv = dir.path().join("rec.csv");
    let v = json(&run(&["simulate", s(&cfg), "--seed", "5", "--out-csv", s(&csv)], &[]));
    let truth = v["summary"]["true_ate"].as_f64().unwrap();
    let records = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = records.lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    for (m, line) in v["summary"]["methods"].as_array().unwrap().iter().zip(&lines[1..]) {
        assert_eq!(m["sd"], 0.0);
        let estimate: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((m["bias"].as_f64().unwrap() - (estimate - truth)).abs() < 1e-12);
        let cov = m["coverage"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&cov));
    }
    assert_eq!(v["manifest"]["seed"], 5);
    assert_eq!(v["config"]["seed"], 5);
}

#[test]
fn simulate_is_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", r#"{"n":60,"p":6,"s":3,"rho":0.0,"n_A":30,"replications":12,"folds":5,"n_lambda":20,"bootstrap":30}"#);
    let fixed = ("SOURCE_DATE_EPOCH", "0");
    let one = run(&["simulate", s(&cfg), "--seed", "9"], &[fixed, ("LASSO_ATE_THREADS", "1")]);
    let many = run(&["simulate", s(&cfg), "--seed", "9"], &[fixed, ("LASSO_ATE_THREADS", "4")]);
    let flag = run(&["simulate", s(&cfg), "--seed", "9", "--threads", "3"], &[fixed]);
    assert!(one.status.success());
    assert_eq!(one.stdout, many.stdout);
    assert_eq!(one.stdout, flag.stdout);
    let other = run(&["simulate", s(&cfg), "--seed", "10"], &[fixed]);
    assert_ne!(one.stdout, other.stdout);
}

#[test]
fn simulate_rejects_bad_configs() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.toml", &SIM.replace("REPS", "0"));
    assert_eq!(run(&["simulate", s(&bad), "--seed", "1"], &[]).status.code(), Some(2));
    let unknown = write(dir.path(), "unknown.toml", &(SIM.replace("REPS", "2") + "colour = 1\n"));
    assert_eq!(run(&["simulate", s(&unknown), "--seed", "1"], &[]).status.code(), Some(2));
    let good = write(dir.path(), "good.toml", &SIM.replace("REPS", "2"));
    assert_eq!(run(&["simulate", s(&good)], &[]).status.code(), Some(2), "seed is required");
    let threads = run(&["simulate", s(&good), "--seed", "1"], &[("LASSO_ATE_THREADS", "many")]);
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn diagnose_report_fields_and_flags() {
    let dir = TempDir::new().unwrap();
    let (data, meta) = experiment(dir.path(), 80, 5);
    let v = json(&run(
        &["diagnose", s(&data), s(&meta), "--seed", "3", "-B", "1", "--folds", "4", "--fourth-moment-threshold", "0.1"],
        &[],
    ));
    let r = &v["report"];
    for key in [
        "fourth_moments",
        "flagged_fourth_moment_columns",
        "selection_treated",
        "selection_control",
        "estimated_support",
        "residual_second_moments",
        "delta_n_hat",
        "scaling_stat",
        "gram_eigs_on_support",
        "checks",
        "not_estimable",
    ] {
        assert!(r.get(key).is_some(), "{key}");
    }
    assert_eq!(r["selection_treated"]["resamples"], 1);
    let flagged = r["flagged_fourth_moment_columns"].as_array().unwrap();
    assert!(!flagged.is_empty());
    for j in flagged {
        assert!(r["fourth_moments"][j.as_u64().unwrap() as usize].as_f64().unwrap() > 0.1);
    }
    let flags: Vec<&Value> = r["checks"].as_array().unwrap().iter().filter(|c| c["status"] == "FLAG").collect();
    assert!(flags.iter().any(|c| c["condition"] == "moments"));
    assert_eq!(v["covariates"].as_array().unwrap().len(), 5);
    assert_eq!(run(&["diagnose", s(&data), s(&meta)], &[]).status.code(), Some(2), "seed is required");
}

#[test]
fn diagnose_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (data, meta) = experiment(dir.path(), 60, 4);
    let args = ["diagnose", s(&data), s(&meta), "--seed", "8", "-B", "6", "--folds", "3"];
    let fixed = [("SOURCE_DATE_EPOCH", "0")];
    assert_eq!(run(&args, &fixed).stdout, run(&args, &fixed).stdout);
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn featurize_two_mains_and_round_trip() {
    let dir = TempDir::new().unwrap();
    let raw = "a,b,y\n1,5,0\n2,3,1\n4,4,0\n7,1,1\n3,9,0\n6,2,1\n";
    let data = write(dir.path(), "raw.csv", raw);
    let meta = write(dir.path(), "raw.json", r#"{"outcome":"y"}"#);
    let out = dir.path().join("design.csv");
    let res = run(
        &[
            "featurize",
            s(&data),
            s(&meta),
            "--quadratics",
            "--interactions",
            "--corr-threshold",
            "1.0",
            "--out-csv",
            s(&out),
        ],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (header, rows) = read_table(&out);
    assert_eq!(header, ["a", "b", "a^2", "b^2", "a:b", "y"]);
    let md: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("design.json")).unwrap()).unwrap();
    let record = md["design"]["standardization_record"].as_array().unwrap();
    let a = [1.0, 2.0, 4.0, 7.0, 3.0, 6.0];
    let b = [5.0, 3.0, 4.0, 1.0, 9.0, 2.0];
    for (i, row) in rows.iter().enumerate() {
        let raw_values = [a[i], b[i], a[i] * a[i], b[i] * b[i], a[i] * b[i]];
        for (j, want) in raw_values.iter().enumerate() {
            let back = row[j] * record[j]["scale"].as_f64().unwrap() + record[j]["center"].as_f64().unwrap();
            assert!((back - want).abs() <= 1e-10);
        }
        assert_eq!(row[5], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0][i]);
    }
    assert_eq!(md["design"]["sources"][4], serde_json::json!(["a", "b"]));
    assert_eq!(md["manifest"]["command"], "featurize");
}

#[test]
fn featurize_collapses_duplicates_and_feeds_estimate() {
    let dir = TempDir::new().unwrap();
    let (data, meta) = experiment(dir.path(), 40, 2);
    let text = std::fs::read_to_string(&data).unwrap();
    let dup: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let copy = if i == 0 { "x0copy".to_string() } else { l.split(',').nth(2).unwrap().to_string() };
            format!("{l},{copy}\n")
        })
        .collect();
    let data = write(dir.path(), "dup.csv", &dup);
    let out = dir.path().join("f.csv");
    let md = dir.path().join("f-meta.json");
    let res = run(&["featurize", s(&data), s(&meta), "--out-csv", s(&out), "--out-meta", s(&md)], &[]);
    assert!(res.status.success());
    let (header, _) = read_table(&out);
    assert_eq!(header, ["x0", "x1", "y", "t"]);
    let meta_json: Value = serde_json::from_str(&std::fs::read_to_string(&md).unwrap()).unwrap();
    assert_eq!(meta_json["design"]["dropped"][0]["reason"], "duplicate");
    let v = json(&run(&["estimate", s(&out), s(&md), "--methods", "unadjusted"], &[]));
    assert_eq!(v["reports"][0]["n"], 40);
}
