use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use approx::assert_abs_diff_eq;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn polcomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polcomp"))
        .current_dir(dir)
        .args(args)
        .env_remove("POLCOMP_OUT_DIR")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("polcomp runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn curve_args(dir: &Path, n: usize) -> Vec<String> {
    let out = polcomp(dir, &["synth", "curves", "-o", "curves"]);
    assert!(out.status.success(), "{}", stderr(&out));
    (1..=n)
        .flat_map(|i| ["--curve".to_string(), format!("curves/lcvr{i}.csv")])
        .collect()
}

fn compensate(dir: &Path, curves: &[String], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = vec!["compensate"];
    args.extend(curves.iter().map(String::as_str));
    args.extend_from_slice(extra);
    polcomp(dir, &args)
}

fn log_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn characterize_fixture_spans_two_pi() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = fixture("sweep.csv");
    let out = polcomp(
        dir.path(),
        &["characterize", sweep.to_str().unwrap(), "-o", "curve.csv"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("folds: 2"), "{}", stdout(&out));

    let text = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "drive_voltage_rms_v,retardance_rad,retardance_error_rad"
    );
    let deltas: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let span =
        deltas.iter().cloned().fold(f64::MIN, f64::max) - deltas.iter().cloned().fold(f64::MAX, f64::min);
    assert!(span >= TAU, "span {span}");

    let meta = json(&dir.path().join("curve.json"));
    assert_eq!(meta["wavelength_nm"], 1550.0);
    assert_eq!(meta["manifest"], "curve.csv.manifest.json");
    let manifest = json(&dir.path().join("curve.csv.manifest.json"));
    assert!(manifest["command"]["characterize"].is_object());
    assert_eq!(manifest["timestamp"], "2023-11-14T22:13:20Z");
}

#[test]
fn truncated_sweep_cites_line() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = fixture("truncated_sweep.csv");
    let out = polcomp(
        dir.path(),
        &["characterize", sweep.to_str().unwrap(), "-o", "curve.csv"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 13"), "{}", stderr(&out));
    assert!(!dir.path().join("curve.csv").exists());
}

#[test]
fn constant_sweep_is_ambiguous_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = fixture("constant_sweep.csv");
    let out = polcomp(
        dir.path(),
        &["characterize", sweep.to_str().unwrap(), "-o", "curve.csv"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unwrap ambiguity"), "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn bad_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.csv"), "volts,reading,sem\n1,2,3\n").unwrap();
    std::fs::write(
        dir.path().join("s.json"),
        r#"{"background_voltage_v": 0.0, "background_sem_v": 0.0}"#,
    )
    .unwrap();
    let out = polcomp(dir.path(), &["characterize", "s.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("expected header"), "{}", stderr(&out));
}

#[test]
fn tomography_of_h_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let scan = fixture("scan_h.csv");
    let out = polcomp(
        dir.path(),
        &["tomography", scan.to_str().unwrap(), "-o", "h.json"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&dir.path().join("h.json"));
    let u: Vec<f64> = v["normalized"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_abs_diff_eq!(u[0], 1.0, epsilon = 1e-6);
    assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-6);
    assert_abs_diff_eq!(u[2], 0.0, epsilon = 1e-6);
    for k in ["a0", "b0", "c0", "d0"] {
        assert!(v["fourier"][k].is_number());
    }
    assert_eq!(v["stokes"].as_array().unwrap().len(), 4);
    assert!(v["dop"].is_number());
    assert_eq!(v["manifest"], "h.json.manifest.json");
}

#[test]
fn tomography_without_sidecar_fails() {
    let dir = tempfile::tempdir().unwrap();
    let scan = fixture("scan_no_sidecar.csv");
    let out = polcomp(
        dir.path(),
        &["tomography", scan.to_str().unwrap(), "-o", "x.json"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sidecar"), "{}", stderr(&out));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn tomography_directory_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = polcomp(
        d,
        &[
            "synth",
            "scan",
            "--state",
            "A",
            "--noise-preset",
            "paper",
            "--count",
            "50",
            "-o",
            "scans",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = polcomp(d, &["tomography", "scans", "--truth", "A", "-o", "a.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("scan_049.csv"));
    assert!(text.contains("mean fidelity over 50 scans"));
    let v = json(&d.join("a.json"));
    assert_eq!(v["n"], 50);
    assert_eq!(v["scans"].as_array().unwrap().len(), 50);
    assert_eq!(v["reference_kind"], "truth");
    let mean = v["mean_fidelity"].as_f64().unwrap();
    assert!((0.99..1.0).contains(&mean), "{mean}");
    assert!(v["std_error"].as_f64().unwrap() > 0.0);
}

#[test]
fn noiseless_compensation_takes_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let curves = curve_args(dir.path(), 4);
    let out = compensate(
        dir.path(),
        &curves,
        &["--noise-preset", "none", "--seed", "3", "-o", "log.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("steps to F>99.5%: 1"), "{}", stdout(&out));
    let lines = log_lines(&dir.path().join("log.jsonl"));
    let summary = lines.last().unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["steps_to_995"], 1);
    assert_eq!(summary["reason"], "fine_threshold_reached");
    let first = &lines[0];
    for k in [
        "d1_rad", "d2_rad", "d3_rad", "d4_rad", "v1", "v4", "fidelity", "stokes",
    ] {
        assert!(!first[k].is_null(), "{k}");
    }
}

#[test]
fn compensation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let curves = curve_args(dir.path(), 4);
    for name in ["a.jsonl", "b.jsonl"] {
        let out = compensate(dir.path(), &curves, &["--target", "R", "--seed", "7", "-o", name]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b.jsonl")).unwrap();
    // Only the manifest reference in the summary differs.
    assert_eq!(a.replace("a.jsonl", "x"), b.replace("b.jsonl", "x"));
}

#[test]
fn exhausted_budget_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let curves = curve_args(dir.path(), 4);
    let out = compensate(
        dir.path(),
        &curves,
        &[
            "--seed",
            "5",
            "--fine-threshold",
            "0.99999",
            "--max-steps",
            "4",
            "-o",
            "log.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let lines = log_lines(&dir.path().join("log.jsonl"));
    assert_eq!(lines.last().unwrap()["reason"], "budget_exhausted");
}

#[test]
fn three_cells_are_enough() {
    let dir = tempfile::tempdir().unwrap();
    let curves = curve_args(dir.path(), 3);
    let out = compensate(dir.path(), &curves, &["--seed", "1", "-o", "log.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = log_lines(&dir.path().join("log.jsonl"));
    assert!(lines[0]["d4_rad"].is_null() && lines[0]["v4"].is_null());
}

#[test]
fn compensation_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let curves = curve_args(dir.path(), 2);
    let out = compensate(dir.path(), &curves, &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let curves = curve_args(dir.path(), 4);
    let out = compensate(dir.path(), &curves, &["--target", "Q"]);
    assert_eq!(out.status.code(), Some(2));
    let out = compensate(
        dir.path(),
        &curves,
        &["--coarse-threshold", "0.999", "--fine-threshold", "0.99"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = compensate(dir.path(), &curves, &["--noise-preset", "loud"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_stats_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = polcomp(
        dir.path(),
        &["bench", "-n", "8", "--noise-preset", "paper", "-o", "stats.json"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&dir.path().join("stats.json"));
    assert_eq!(v["trials"].as_array().unwrap().len(), 8);
    for k in ["mean_steps_to_97", "mean_steps_to_99", "mean_steps_to_995"] {
        assert!(v[k].is_number(), "{k}");
    }
    assert!(v["unreached"].is_object());
    let traces = std::fs::read_to_string(dir.path().join("stats.traces.csv")).unwrap();
    assert!(traces.starts_with("seed,step,phase,fidelity,infidelity,best_fidelity,true_fidelity\n"));
    assert!(traces.lines().count() > 8);
}

#[test]
fn bench_rejects_zero_trials() {
    let dir = tempfile::tempdir().unwrap();
    let out = polcomp(dir.path(), &["bench", "-n", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_is_byte_identical_for_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let out = polcomp(
            dir.path(),
            &["bench", "-n", "6", "--base-seed", "42", "--out-dir", d],
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for f in ["bench_stats.json", "bench_stats.traces.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        let (a, b) = (String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
        assert_eq!(a.replace("a/", "x/"), b.replace("b/", "x/"), "{f}");
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_polcomp"))
        .current_dir(dir.path())
        .args(["bench", "-n", "1", "--noise-preset", "none"])
        .env("POLCOMP_OUT_DIR", "results")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("results/bench_stats.json").exists());
    assert!(dir.path().join("results/bench_stats.json.manifest.json").exists());
    let m = json(&dir.path().join("results/bench_stats.json.manifest.json"));
    assert_eq!(m["seeds"], serde_json::json!([0]));
}

#[test]
fn replay_reproduces_compensation_log() {
    let dir = tempfile::tempdir().unwrap();
    let curves = curve_args(dir.path(), 4);
    let out = compensate(dir.path(), &curves, &["--seed", "9", "-o", "log.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = dir.path().join("log.jsonl");
    let manifest = dir.path().join("log.jsonl.manifest.json");
    let before = (std::fs::read(&log).unwrap(), std::fs::read(&manifest).unwrap());
    std::fs::remove_file(&log).unwrap();

    let elsewhere = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_polcomp"))
        .current_dir(elsewhere.path())
        .args(["replay", manifest.to_str().unwrap()])
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&log).unwrap(), before.0);
    assert_eq!(std::fs::read(&manifest).unwrap(), before.1);
}
