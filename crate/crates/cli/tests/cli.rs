use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn smm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smm")).args(args).output().expect("run smm")
}

fn stderr_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stderr).lines().map(str::to_string).collect()
}

fn assert_fails(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stderr_lines(out).len(), 1, "expected one diagnostic line: {:?}", stderr_lines(out));
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn draw(dir: &TempDir, design: &str, n: usize, seed: u64) -> PathBuf {
    let p = dir.path().join(format!("{design}-{seed}.csv"));
    let out = smm(&["draw", "--design", design, "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&p)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn estimate<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["estimates"].as_array().unwrap().iter().find(|e| e["name"] == name).unwrap()
}

#[test]
fn additive_two_step_fit_reports_j_and_intervals() {
    let dir = TempDir::new().unwrap();
    let data = draw(&dir, "m1", 4000, 5);
    let r = json(&smm(&["fit", "--data", s(&data), "--model", "additive", "--steps", "2", "--json", "-"]));
    assert_eq!(r["schema"], 1);
    assert_eq!(r["j_df"], 1);
    let p = r["j_p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let psi = estimate(&r, "psi0");
    let (e, se) = (psi["estimate"].as_f64().unwrap(), psi["se"].as_f64().unwrap());
    assert!(se > 0.0 && psi["exp"].is_null());
    assert!((psi["ci_low"].as_f64().unwrap() - (e - 1.959964 * se)).abs() <= 1e-12 * e.abs().max(1.0));
    assert_eq!(r["provenance"]["n"], 4000);
    assert_eq!(r["provenance"]["file"], s(&data));
}

#[test]
fn multiplicative_report_exponentiates_endpoints() {
    let dir = TempDir::new().unwrap();
    let data = draw(&dir, "m1", 4000, 6);
    let r = json(&smm(&["fit", "--data", s(&data), "--model", "mult-ratio", "--json", "-"]));
    let psi = estimate(&r, "psi0");
    let exp = &psi["exp"];
    for (raw, scaled) in [("estimate", "estimate"), ("ci_low", "ci_low"), ("ci_high", "ci_high")] {
        assert_eq!(exp[scaled].as_f64().unwrap(), psi[raw].as_f64().unwrap().exp());
    }
}

#[test]
fn one_step_just_identified_has_null_j() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "k2.csv", "y,x,z\n1,1,1\n0,0,0\n1,0,1\n0,1,0\n1,1,1\n0,0,0\n0,1,1\n1,0,0\n1,1,1\n0,0,1\n");
    let r = json(&smm(&["fit", "--data", s(&data), "--model", "additive", "--steps", "1", "--json", "-"]));
    assert!(r["j_statistic"].is_null() && r["j_df"].is_null() && r["j_p_value"].is_null());
}

#[test]
fn json_file_and_table_together() {
    let dir = TempDir::new().unwrap();
    let data = draw(&dir, "m2", 3000, 7);
    let path = dir.path().join("report.json");
    let out = smm(&["fit", "--data", s(&data), "--model", "logistic", "--json", s(&path)]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("psi0") && table.contains("exp(psi0)"));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(r["model"], "logistic");
}

#[test]
fn logistic_requires_binary_outcome() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "cont.csv", "y,x,z\n0.5,1,1\n0,0,0\n1.5,0,1\n0,1,0\n2,1,1\n0,0,0\n");
    assert_fails(&smm(&["fit", "--data", s(&data), "--model", "logistic"]), 2);
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "bad.csv", "y,x,z\n1,1,1\n0,abc,0\n");
    assert_fails(&smm(&["fit", "--data", s(&data), "--model", "additive"]), 2);
    assert_fails(&smm(&["fit", "--data", s(&data), "--model", "additive", "--outcome", "missing"]), 2);
    assert_fails(&smm(&["fit", "--data", "/nonexistent/file.csv", "--model", "additive"]), 2);
    assert_fails(&smm(&["fit", "--data", s(&data), "--model", "nonsense"]), 2);
    assert_fails(&smm(&["fit", "--unknown-flag"]), 2);
}

#[test]
fn single_level_instrument_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "one.csv", "y,x,z\n1,1,0\n0,0,0\n1,0,0\n0,1,0\n");
    assert_fails(&smm(&["fit", "--data", s(&data), "--model", "additive"]), 3);
}

#[test]
fn collapse_merges_levels_with_equal_exposure() {
    let dir = TempDir::new().unwrap();
    // levels 1 and 2 share the exposure mean 0.5
    let data = write(
        &dir,
        "merge.csv",
        "y,x,z\n0,0,0\n0,0,0\n1,0,0\n0,1,0\n1,1,1\n0,0,1\n1,1,2\n1,0,2\n0,1,1\n1,0,1\n1,1,2\n0,0,2\n",
    );
    let r = json(&smm(&["fit", "--data", s(&data), "--model", "additive", "--collapse-tol", "1e-9", "--json", "-"]));
    assert_eq!(r["provenance"]["merged_levels"], serde_json::json!([[0.0], [1.0, 2.0]]));
    assert_eq!(r["provenance"]["instrument_levels"], serde_json::json!([0.0, 1.0]));
}

#[test]
fn simulate_json_is_reproducible_across_runs_and_threads() {
    let args = ["simulate", "--design", "m1", "--n", "800", "--reps", "12", "--seed", "42", "--estimator", "mult-ratio"];
    let run = |threads: &str| {
        let mut a: Vec<&str> = args.to_vec();
        a.extend(["--threads", threads, "--json", "-"]);
        let out = smm(&a);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let one = run("1");
    assert_eq!(one, run("1"));
    assert_eq!(one, run("3"));
    let v: Value = serde_json::from_slice(&one).unwrap();
    assert_eq!(v["reps"], 12);
    assert_eq!(v["estimator"], "mult-ratio");
}

#[test]
fn simulate_validation_errors_exit_2() {
    let base = ["simulate", "--design", "m1", "--n", "100", "--estimator", "mult"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        smm(&a)
    };
    assert_fails(&with(&["--reps", "0"]), 2);
    assert_fails(&with(&["--reps", "2", "--set", "no_such_field=1"]), 2);
    assert_fails(&with(&["--reps", "2", "--perturb", "z3_offset=0.1"]), 2);
    assert_fails(&with(&["--reps", "2", "--steps", "3"]), 2);
    assert_fails(&smm(&["simulate", "--design", "m9", "--n", "10", "--reps", "1", "--estimator", "mult"]), 2);
}

#[test]
fn probit_population_prints_increment_ratios() {
    let out = smm(&["simulate", "--design", "probit-late", "--population"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for v in ["1.1585", "1.3227", "1.5303", "1.3090"] {
        assert!(text.contains(v), "missing {v} in\n{text}");
    }
}

#[test]
fn config_file_drives_simulation_and_flags_override() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "run.toml",
        "design = \"m2\"\nn = 600\nreps = 4\nseed = 3\nestimator = \"logistic\"\n[perturbation]\nz2_offset = 0.25\n",
    );
    let v = json(&smm(&["simulate", "--config", s(&cfg), "--reps", "3", "--json", "-"]));
    assert_eq!(v["reps"], 3);
    assert_eq!(v["n"], 600);
    assert_eq!(v["design"], "m2");
}

#[test]
fn decompose_two_levels_gives_single_wald_ratio() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "k2.csv", "y,x,z\n1,1,1\n0,0,0\n1,0,1\n0,1,0\n1,1,1\n0,0,0\n0,1,1\n1,0,0\n1,1,1\n0,0,1\n");
    let v = json(&smm(&["decompose", "--data", s(&data), "--form", "late", "--json", "-"]));
    assert_eq!(v["adjacent_estimates"].as_array().unwrap().len(), 1);
    assert!((v["weights"][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn decompose_probit_draw_has_three_increments() {
    let dir = TempDir::new().unwrap();
    let data = draw(&dir, "probit-late", 40000, 9);
    let v = json(&smm(&["decompose", "--data", s(&data), "--form", "lrr", "--json", "-"]));
    let est: Vec<f64> = v["adjacent_estimates"].as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect();
    assert_eq!(est.len(), 3);
    let w: f64 = v["weights"].as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
    assert!((v["weighted_average"].as_f64().unwrap() - 1.31).abs() < 0.1);
}

#[test]
fn decompose_rejects_non_binary_exposure_for_risk_ratios() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "cx.csv", "y,x,z\n1,0.5,1\n0,0,0\n1,0.2,1\n0,1.3,0\n1,1,1\n0,0,0\n");
    assert_fails(&smm(&["decompose", "--data", s(&data), "--form", "lrr"]), 2);
}

#[test]
fn decompose_tied_exposure_means_exit_3() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "tie.csv", "y,x,z\n1,1,1\n0,0,1\n1,1,0\n0,0,0\n");
    assert_fails(&smm(&["decompose", "--data", s(&data)]), 3);
}

#[test]
fn draw_stream_matches_simulation_replication() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        assert!(smm(&["draw", "--design", "m2", "--n", "50", "--seed", "4", "--stream", "2", "--out", s(p)]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let stdout = smm(&["draw", "--design", "m2", "--n", "50", "--seed", "4", "--stream", "2"]).stdout;
    assert_eq!(stdout, std::fs::read(&a).unwrap());
}

#[test]
fn m1_simulation_recovers_reference_mean() {
    let v = json(&smm(&[
        "simulate", "--design", "m1", "--n", "10000", "--reps", "500", "--seed", "17", "--estimator", "mult-ratio",
        "--steps", "2", "--json", "-",
    ]));
    let psi = v["parameters"].as_array().unwrap().iter().find(|p| p["name"] == "psi0").unwrap();
    let mean = psi["mean"].as_f64().unwrap();
    assert!((mean - 0.6024).abs() < 0.02, "mean psi {mean}");
}
