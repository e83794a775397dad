//! End-to-end tests of the `kalinv` binary: exit codes, file outputs, and
//! byte-level reproducibility across runs and thread counts.

use std::path::Path;
use std::process::{Command, Output};

fn kalinv(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kalinv"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn kalinv")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn history_column(path: &Path, name: &str) -> Vec<Option<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| {
            let cell = l.split(',').nth(idx).unwrap();
            if cell.is_empty() {
                None
            } else {
                Some(cell.parse().unwrap())
            }
        })
        .collect()
}

#[test]
fn run_ns_recovers_reference_and_manifest_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ns");
    let res = kalinv(
        &[
            "run",
            "--problem",
            "linear2:NS",
            "--method",
            "uki",
            "--iters",
            "30",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let fs = read_json(&out.join("final_state.json"));
    let mean: Vec<f64> = fs["mean"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((mean[0] - 1.0).abs() < 1e-6 && (mean[1] - 1.0).abs() < 1e-6);

    let errs = history_column(&out.join("history.csv"), "param_error");
    assert_eq!(errs.len(), 30);

    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["termination"], "completed");
    for f in manifest["files"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).exists(), "missing {f}");
    }
    // resolved defaults are recorded
    assert_eq!(manifest["config"]["gamma"].as_f64().unwrap(), 0.25);
    assert_eq!(manifest["config"]["alpha"].as_f64().unwrap(), 1.0);
    assert_eq!(manifest["config"]["n_iters"].as_u64().unwrap(), 30);
    assert!(manifest["duration_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn invalid_alpha_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = kalinv(
        &[
            "run",
            "--problem",
            "linear2:NS",
            "--alpha",
            "1.5",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ],
        &[],
    );
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("alpha must lie in (0,1]"), "stderr: {stderr}");
}

#[test]
fn exki_fails_fast_without_jacobian_and_runs_with_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("nofd");
    let res = kalinv(
        &[
            "run",
            "--problem",
            "lorenz63:one_param",
            "--method",
            "exki",
            "--iters",
            "2",
            "--out",
            out1.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(res.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("Jacobian"), "stderr: {stderr}");
    // aborted run still leaves a finalized manifest and an (empty) history
    let manifest = read_json(&out1.join("manifest.json"));
    assert!(manifest["termination"].as_str().unwrap().starts_with("aborted"));
    assert_eq!(history_column(&out1.join("history.csv"), "misfit").len(), 0);

    let out2 = dir.path().join("fd");
    let res = kalinv(
        &[
            "run",
            "--problem",
            "lorenz63:one_param",
            "--method",
            "exki",
            "--iters",
            "1",
            "--fd-jacobian",
            "--out",
            out2.to_str().unwrap(),
        ],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn history_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "2"), ("b", "2"), ("c", "1")] {
        let out = dir.path().join(name);
        let res = kalinv(
            &[
                "run",
                "--problem",
                "linear2:OD",
                "--method",
                "eki",
                "--ensemble-size",
                "9",
                "--iters",
                "12",
                "--seed",
                "42",
                "--out",
                out.to_str().unwrap(),
            ],
            &[("KALINV_THREADS", threads)],
        );
        assert!(res.status.success());
        outputs.push(std::fs::read(out.join("history.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "identical configs diverged");
    assert_eq!(outputs[0], outputs[2], "thread count changed the history");
}

#[test]
fn hilbert_eki_history_shows_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h");
    let res = kalinv(
        &[
            "run",
            "--problem",
            "hilbert:10",
            "--method",
            "eki",
            "--ensemble-size",
            "21",
            "--iters",
            "50",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(res.status.success());
    let errs: Vec<f64> = history_column(&out.join("history.csv"), "param_error")
        .into_iter()
        .map(|v| v.unwrap())
        .collect();
    let (argmin, &min) = errs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    assert!(argmin > 0 && argmin + 1 < 50, "argmin {argmin}");
    assert!(min < errs[0], "no initial decrease");
    assert!(*errs.last().unwrap() > 2.0 * min, "no divergence phase");
}

#[test]
fn invalid_output_dir_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "file").unwrap();
    let out = blocker.join("sub");
    let res = kalinv(
        &[
            "run",
            "--problem",
            "linear2:NS",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(!res.status.success());
    assert!(!out.exists());
}

#[test]
fn validate_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    for spec in ["ns", "od", "ud", "ud-alpha1"] {
        let report_path = dir.path().join(format!("{spec}.json"));
        let res = kalinv(
            &["validate", "--spec", spec, "--out", report_path.to_str().unwrap()],
            &[],
        );
        assert!(res.status.success(), "spec {spec}");
        let report = read_json(&report_path);
        assert_eq!(report["pass"], true, "spec {spec}: {report}");
        assert!(!report["checks"].as_array().unwrap().is_empty());
    }
}

#[test]
fn landscape_writes_finite_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("land.csv");
    let res = kalinv(
        &[
            "landscape",
            "--problem",
            "lorenz63:one_param",
            "--r-min",
            "25",
            "--r-max",
            "26",
            "--points",
            "3",
            "--sigma-r",
            "0.469",
            "--quad-order",
            "8",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "r,fg,fdg");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        for cell in row.split(',') {
            assert!(cell.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn uks_run_completes_with_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("uks");
    let res = kalinv(
        &[
            "run",
            "--problem",
            "linear2:NS",
            "--method",
            "uks",
            "--uks-h",
            "1e-4",
            "--uks-t-end",
            "0.2",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = history_column(&out.join("history.csv"), "cov_frobenius");
    assert_eq!(rows.len(), 2000);
    let fs = read_json(&out.join("final_state.json"));
    assert_eq!(fs["type"], "gaussian");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        r#"
problem = "linear2:NS"
method = "uki"
gamma = 0.5
n_iters = 5
"#,
    )
    .unwrap();
    let out = dir.path().join("r");
    let res = kalinv(
        &[
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--gamma",
            "0.25",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["gamma"].as_f64().unwrap(), 0.25);
    assert_eq!(manifest["config"]["n_iters"].as_u64().unwrap(), 5);
}
