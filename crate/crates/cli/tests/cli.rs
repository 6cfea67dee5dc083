//! End-to-end runs of the `dmpes` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dmpes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmpes")).args(args).env_remove("DMPES_WORKERS").output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["generic_k3.json", "generic_k3_model.json", "conditional_s1_r3.json", "crafted_pooled.json"] {
        let out = dmpes(&["validate", "--config", path(&configs().join(name))]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn validate_names_the_collinearity_violation() {
    let out = dmpes(&["validate", "--config", path(&configs().join("orthogonal_discriminant_model.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("collinear discriminants"), "{err}");
}

#[test]
fn malformed_json_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"name\": \"broken\",\n  \"seed\": ]\n}\n").unwrap();
    for sub in ["validate", "verify"] {
        let mut args = vec![sub, "--config", path(&bad)];
        if sub == "verify" {
            args.extend(["--out", path(dir.path())]);
        }
        let out = dmpes(&args);
        assert_eq!(out.status.code(), Some(2));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("line 3 column 11"), "{err}");
    }
}

#[test]
fn match_writes_sorted_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.csv");
    for matcher in ["0", "1"] {
        let out = dmpes(&[
            "match",
            "--config",
            path(&configs().join("generic_k3.json")),
            "--panel",
            path(&configs().join("panel_generic_k3.csv")),
            "--out",
            path(&pairs),
            "--matcher",
            matcher,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let mut reader = csv::Reader::from_path(&pairs).unwrap();
        let distances: Vec<f64> = reader.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
        assert_eq!(distances.len(), 100);
        assert!(distances.iter().all(|&d| d >= 0.0));
        assert!(distances.windows(2).all(|w| w[0] <= w[1]));
        let table = String::from_utf8_lossy(&out.stdout);
        assert!(table.contains("bias along Z"));
    }
}

#[test]
fn infeasible_strict_caliper_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("generic_k3.json")).unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&text).unwrap();
    config["matchers"] =
        serde_json::json!([{"method": "discriminant-caliper", "caliper_width": 1e-9, "strict_caliper": true}]);
    let cfg = dir.path().join("strict.json");
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out = dmpes(&[
        "match",
        "--config",
        path(&cfg),
        "--panel",
        path(&configs().join("panel_generic_k3.csv")),
        "--out",
        path(&dir.path().join("pairs.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible matching"));
}

#[test]
fn sample_is_a_function_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("conditional_s1_r3.json");
    let draw = |name: &str, seed: &str| {
        let out_path = dir.path().join(name);
        let out = dmpes(&["sample", "--config", path(&cfg), "--seed", seed, "--out", path(&out_path)]);
        assert_eq!(out.status.code(), Some(0));
        std::fs::read(out_path).unwrap()
    };
    assert_eq!(draw("a.csv", "11"), draw("b.csv", "11"));
    assert_ne!(draw("a.csv", "11"), draw("c.csv", "12"));
}

const REPORT_FILES: [&str; 6] =
    ["raw_stats.json", "report.json", "report.txt", "directions.csv", "components.csv", "fits.csv"];

#[test]
fn verify_is_deterministic_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("generic_k3.json");
    let run = |name: &str, workers: &str| {
        let out_dir = dir.path().join(name);
        let out = dmpes(&["--workers", workers, "verify", "--config", path(&cfg), "--out", path(&out_dir)]);
        let code = out.status.code();
        assert!(matches!(code, Some(0) | Some(1)), "{}", String::from_utf8_lossy(&out.stderr));
        (code, out.stdout, REPORT_FILES.map(|f| std::fs::read(out_dir.join(f)).unwrap()))
    };
    let first = run("one", "1");
    assert_eq!(first, run("again", "1"));
    assert_eq!(first, run("eight", "8"));

    // Re-rendering from the raw statistics reproduces every report file.
    let again = dir.path().join("again");
    for f in &REPORT_FILES[1..] {
        std::fs::remove_file(again.join(f)).unwrap();
    }
    let out = dmpes(&["report", "--out", path(&again)]);
    assert_eq!(out.status.code(), first.0);
    assert_eq!(out.stdout, first.1);
    for (f, bytes) in REPORT_FILES.iter().zip(&first.2) {
        assert_eq!(&std::fs::read(again.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn workers_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("generic_k3.json");
    let out = Command::new(env!("CARGO_BIN_EXE_dmpes"))
        .args(["verify", "--suite", "invariance", "--config", path(&cfg), "--out", path(dir.path()), "--format", "csv"])
        .env("DMPES_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.starts_with("claim,method,verdict,checks,failed"));
    assert!(table.contains("affine-invariance,mahalanobis-optimal,PASS"));
}
