use std::path::Path;
use std::process::{Command, Output};

fn lambdacgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lambdacgd"))
        .args(args)
        .env_remove("LAMBDACGD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

const TRAIN_CONFIG: &str = r#"{
  "task": {"kind": "linreg", "dim": 3, "dataset_size": 16, "seed": 4},
  "batch_size": 4,
  "clip_norm": 1.0,
  "learning_rate": 0.2,
  "lambda": 0.7,
  "epochs": 2,
  "iterations": 8,
  "budget": {"epsilon": 2.0, "delta": 1e-5},
  "seed": 3
}"#;

#[test]
fn sens_at_lambda_zero_is_sqrt_k() {
    let v = json(&lambdacgd(&["sens", "--n", "8", "--k", "4", "--b", "2", "--lambda", "0"]));
    assert_eq!(v["sens"], 2.0);
    assert_eq!(v["brute_force"], 2.0);
    assert_eq!(v["consistent"], true);
}

#[test]
fn sens_skips_enumeration_for_large_n() {
    let v = json(&lambdacgd(&["sens", "--n", "64", "--k", "4", "--b", "16", "--lambda", "0.9"]));
    assert!(v["brute_force"].is_null());
    let v = json(&lambdacgd(&[
        "sens", "--n", "12", "--k", "3", "--b", "4", "--lambda", "0.6", "--normalized",
    ]));
    assert_eq!(v["consistent"], true);
    assert!(v["sens"].as_f64().unwrap() >= 3f64.sqrt());
}

#[test]
fn bounds_at_one_are_equal() {
    let v = json(&lambdacgd(&["bounds", "--n", "1"]));
    for key in ["trivial", "diagonal", "lower"] {
        assert_eq!(v[key], 1.0);
    }
}

#[test]
fn full_batch_sweep_picks_zero() {
    let o = lambdacgd(&["sweep-lambda", "--n", "64", "--k", "64", "--b", "1", "--metric", "rmse"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("n,k,b,lambda,rmse,maxse,sens"));
    assert_eq!(out.lines().count(), 1 + 511);
    let star: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(star["lambda_star"], 0.0);
}

#[test]
fn sweep_writes_into_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lambdacgd"))
        .args(["sweep-lambda", "--n", "32", "--k", "2", "--b", "16", "--metric", "maxse"])
        .args(["--grid", "16", "--out", "sweep.csv"])
        .env("LAMBDACGD_OUT_DIR", dir.path())
        .output()
        .unwrap();
    let v = json(&o);
    assert_eq!(v["metric"], "maxse");
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn outputs_are_byte_deterministic() {
    for args in [
        &["sweep-lambda", "--n", "100", "--k", "3", "--b", "33", "--grid", "64"][..],
        &["ratio-normalized", "--b", "16", "--k-list", "8,1,4"][..],
        &["rmse-table", "--n", "48", "--k", "3", "--b", "16", "--grid", "32"][..],
        &["test-vectors", "--emit", "-", "--steps", "5"][..],
    ] {
        let args: Vec<&str> = args.iter().map(|a| if *a == "-" { "/dev/stdout" } else { a }).collect();
        let a = lambdacgd(&args);
        let b = lambdacgd(&args);
        assert!(a.status.success(), "{args:?}: {}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, b.stdout, "{args:?}");
        assert_eq!(a.stderr, b.stderr, "{args:?}");
    }
}

#[test]
fn ratio_rows_sorted_by_k() {
    let out = stdout(&lambdacgd(&["ratio-normalized", "--b", "8", "--k-list", "4,1", "--grid", "5"]));
    let ks: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ks, ["1", "1", "1", "4", "4", "4"]);
    for line in out.lines().skip(1) {
        let r: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(r < 1.0);
    }
}

#[test]
fn header_present_without_rows() {
    let out = stdout(&lambdacgd(&["ratio-normalized", "--b", "4", "--k-list", "1", "--grid", "2"]));
    assert_eq!(out, "n,k,b,lambda,ratio\n");
}

#[test]
fn rmse_table_lists_every_family() {
    let out = stdout(&lambdacgd(&["rmse-table", "--n", "32", "--k", "32", "--b", "1"]));
    let labels: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["dp-sgd", "lambda", "lambda-normalized", "diag-quarter"]);
}

#[test]
fn bench_noise_accounting() {
    let out = stdout(&lambdacgd(&["bench-noise", "--d", "8", "--steps", "10", "--mode", "lambda"]));
    let mut lines = out.lines();
    assert_eq!(
        lines.next(),
        Some("step,nanos,fresh_blocks,regenerated_blocks,saved_states")
    );
    for (i, line) in lines.enumerate() {
        let f: Vec<u64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[0], i as u64 + 1);
        assert_eq!(f[2], i as u64 + 1);
        assert_eq!(f[3], i as u64);
        assert!(f[4] <= 1);
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(lambdacgd(&["bounds", "--n", "3", "--bogus"]).status.code(), Some(2));
    assert_eq!(lambdacgd(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lambdacgd(&["sens", "--n", "x", "--k", "1", "--b", "1", "--lambda", "0"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let o = lambdacgd(&["sens", "--n", "8", "--k", "5", "--b", "2", "--lambda", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
    assert_eq!(lambdacgd(&["bounds", "--n", "0"]).status.code(), Some(1));
    assert_eq!(
        lambdacgd(&["sens", "--n", "8", "--k", "1", "--b", "1", "--lambda", "1.0"]).status.code(),
        Some(1)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", TRAIN_CONFIG);
    let trace = dir.path().join("t.jsonl");
    let v = json(&lambdacgd(&["train", "--config", &cfg, "--trace", trace.to_str().unwrap()]));
    assert_eq!(v["steps"], 8);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[0]["header"]["config"]["lambda"], 0.7);
    assert_eq!(lines[9]["final"]["theta_hash"], v["theta_hash"]);

    let again = json(&lambdacgd(&["train", "--config", &cfg, "--trace", trace.to_str().unwrap()]));
    assert_eq!(again["theta_hash"], v["theta_hash"]);
    let other = json(&lambdacgd(&[
        "train", "--config", &cfg, "--trace", trace.to_str().unwrap(), "--seed", "4", "--lambda", "0.2",
    ]));
    assert_ne!(other["theta_hash"], v["theta_hash"]);
    let header: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&trace).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["config"]["lambda"], 0.2);
}

#[test]
fn train_rejects_amplification_and_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let bnb = TRAIN_CONFIG.replace("\"seed\": 3", "\"seed\": 3, \"amplification\": \"bnb\"");
    let cfg = write(dir.path(), "bnb.json", &bnb);
    let o = lambdacgd(&["train", "--config", &cfg, "--trace", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not implemented"));

    let bad = TRAIN_CONFIG.replace("\"iterations\": 8", "\"iterations\": 9");
    let cfg = write(dir.path(), "bad.json", &bad);
    let o = lambdacgd(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iterations"));
}

#[test]
fn test_vectors_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tv.json");
    let p = path.to_str().unwrap();
    for mode in ["independent", "lambda", "banded"] {
        let o = lambdacgd(&["test-vectors", "--emit", p, "--mode", mode, "--p", "4", "--d", "3"]);
        assert!(o.status.success());
        let o = lambdacgd(&["test-vectors", "--check", p]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut tv: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let x = tv["outputs"][2][1].as_f64().unwrap();
    tv["outputs"][2][1] = serde_json::json!(x + 1e-12);
    std::fs::write(&path, tv.to_string()).unwrap();
    let o = lambdacgd(&["test-vectors", "--check", p]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step 3 coordinate 1"));
}
