use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn structgp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structgp")).args(args).current_dir(dir).output().expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Data rows of a CSV written by the CLI (comment line and header skipped).
fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(2).map(String::from).collect()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const ADAM_30: &str = r#"{"data": {"kind": "snelson", "n": 80}, "num_inducing": 5, "optimizer": "Adam", "epochs": 30}"#;

#[test]
fn fit_writes_snapshot_trace_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", ADAM_30);
    let o = structgp(&["fit", "--config", &cfg, "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    for f in ["model.json", "trace.csv", "report.json", "curve.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("# structgp "));
    assert_eq!(lines.next().unwrap(), "step,objective,sigma2,kernel_var,lengthscale_1,m");
    assert_eq!(data_rows(&run.join("trace.csv")).len(), 30);

    let r = json(&run.join("report.json"));
    for k in ["objective", "rmse", "mean_ll", "sigma2", "kernel_variance", "lengthscales", "m", "jitter_used"] {
        assert!(r.get(k).is_some(), "missing {k}");
    }
    assert_eq!(r["seed"], 0);
    assert_eq!(r["version"], structgp::VERSION);
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().nth(1).unwrap(), "x_grid,mean,lower,upper");
}

#[test]
fn invalid_method_alpha_combination_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = structgp(&["fit", "--method", "SGPR", "--alpha", "0.5", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));

    let o = structgp(&["fit", "--method", "T-PEP", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));

    let o = structgp(&["fit", "--method", "BT-SGPR", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_blocks"));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn bad_config_values_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "typo.json", r#"{"num_inducng": 4}"#);
    let o = structgp(&["fit", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_inducng"));

    let o = structgp(&["fit", "--num-inducing", "500", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_inducing"));

    let cfg = write_config(tmp.path(), "frac.json", r#"{"test_fraction": 1.5}"#);
    let o = structgp(&["fit", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("test_fraction"));
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", ADAM_30);
    let files = ["trace.csv", "report.json", "model.json", "curve.csv"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        assert!(structgp(&["fit", "--config", &cfg, "--seed", "4", "--out", "run"], tmp.path()).status.success());
        runs.push(files.map(|f| fs::read(tmp.path().join("run").join(f)).unwrap()));
        fs::remove_dir_all(tmp.path().join("run")).unwrap();
    }
    for (i, f) in files.iter().enumerate() {
        assert!(runs[0][i] == runs[1][i], "{f} differs");
    }
}

#[test]
fn flags_override_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"data": {"kind": "snelson", "n": 60}, "seed": 3, "num_inducing": 3, "method": "T-SGPR", "out": "from_file", "optimizer": "Adam", "epochs": 5}"#,
    );
    let o = structgp(&["fit", "--config", &cfg, "--seed", "9", "--num-inducing", "4", "--method", "BT-SGPR", "--blocks", "6", "--out", "flags"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!tmp.path().join("from_file").exists());
    let m = json(&tmp.path().join("flags/model.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["inducing"].as_array().unwrap().len(), 4);
    assert_eq!(m["spec"]["method"], "BT-SGPR");
    assert_eq!(m["spec"]["num_blocks"], 6);
}

#[test]
fn compare_shares_initialization_and_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"data": {"kind": "snelson", "n": 100}, "test_fraction": 0.2, "num_inducing": 5,
            "methods": [{"method": "SGPR"}, {"method": "T-SGPR"}, {"method": "BT-SGPR", "blocks": 10}]}"#,
    );
    let o = structgp(&["compare", "--config", &cfg, "--out", "cmp"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cmp = tmp.path().join("cmp");
    let c = json(&cmp.join("compare.json"));
    let ms = c["methods"].as_array().unwrap();
    assert_eq!(ms.len(), 3);
    let init: Vec<f64> = ms.iter().map(|m| m["initial_objective"].as_f64().unwrap()).collect();
    assert!(init[0] <= init[1] + 1e-9 && init[1] <= init[2] + 1e-9, "{init:?}");
    for m in ms {
        assert_eq!(m["n_train"], 80);
        assert_eq!(m["n_eval"], 20);
        assert_eq!(m["metrics_on"], "test");
    }
    let rows = data_rows(&cmp.join("compare.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("BT-SGPR[B=10],"));
    for d in ["SGPR", "T-SGPR", "BT-SGPR_B10"] {
        assert!(cmp.join(d).join("curve.csv").exists(), "{d}");
    }
}

#[test]
fn compare_needs_two_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let o = structgp(&["compare", "--method", "SGPR", "--out", "c"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("methods"));
}

#[test]
fn predict_reproduces_fit_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"data": {"kind": "snelson", "n": 120}, "test_fraction": 0.25, "standardize": true, "method": "T-PEP", "alpha": 0.5}"#,
    );
    assert!(structgp(&["fit", "--config", &cfg, "--out", "run"], tmp.path()).status.success());
    let o = structgp(&["predict", "--model", "run/model.json", "--out", "pred"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = json(&tmp.path().join("run/report.json"));
    let b = json(&tmp.path().join("pred/report.json"));
    for k in ["rmse", "mean_ll", "sigma2", "objective"] {
        let (x, y) = (a[k].as_f64().unwrap(), b[k].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "{k}: {x} vs {y}");
    }
    assert!(a["m"].as_f64().is_some());
    assert_eq!(data_rows(&tmp.path().join("pred/predictions.csv")).len(), 30);
}

#[test]
fn csv_data_source() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("a,b,target\n");
    for i in 0..60 {
        let (a, b) = (i as f64 * 0.1, ((i * 7) % 13) as f64 * 0.3);
        csv.push_str(&format!("{a},{b},{}\n", a.sin() + 0.2 * b));
    }
    fs::write(tmp.path().join("d.csv"), csv).unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"data": {"kind": "csv", "path": "d.csv", "target": "target"}, "standardize": true, "num_inducing": 6, "inducing_init": "kmeans"}"#,
    );
    let o = structgp(&["fit", "--config", &cfg, "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&tmp.path().join("run/report.json"));
    assert_eq!(r["lengthscales"].as_array().unwrap().len(), 2);
    assert!(!tmp.path().join("run/curve.csv").exists());

    let cfg = write_config(tmp.path(), "missing.json", r#"{"data": {"kind": "csv", "path": "nope.csv"}}"#);
    let o = structgp(&["fit", "--config", &cfg, "--out", "run2"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_names_tampered_criterion_and_repeats_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let o = structgp(&["verify", "--tamper-tsgpr", "-1.0"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("[FAIL] criterion  1 ordering-chain"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ordering-chain"));

    let a = structgp(&["verify", "--seed", "2", "--out", "v"], tmp.path());
    let b = structgp(&["verify", "--seed", "2"], tmp.path());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.status.code(), b.status.code());
    let v = json(&tmp.path().join("v/verify.json"));
    let ids: Vec<u64> = v["criteria"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
    for id in 1..=7 {
        assert!(ids.contains(&id));
    }
}
