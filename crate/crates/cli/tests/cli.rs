use std::path::Path;
use std::process::{Command, Output};

use ncpwatt::data::Dataset;
use ncpwatt::robustness::ks_2samp;

fn ncpwatt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncpwatt"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ncpwatt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--seed", "1", "--rows", "2000", "--out", "a.json"]);
    ok(dir.path(), &["synth", "--seed", "1", "--rows", "2000", "--out", "b.json"]);
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    let ds = Dataset::load(&dir.path().join("a.json")).unwrap();
    assert_eq!(ds.len(), 2000);
    assert_eq!(ds.split().unwrap().train.len(), 1300);
}

#[test]
fn sweep_cross_product_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
output_dir = "out"

[dataset]
source = "synthetic"
rows = 300

[grid]
models = ["ncp", "lstm"]
neurons = [4, 6]
epochs = [2, 3]
seeds = [0]

[perturbations]
noise = []
drift = []
"#;
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    let first = ok(dir.path(), &["sweep", "--config", "exp.toml"]);
    assert!(first.contains("4 groups trained, 0 cached"), "{first}");
    let csv = std::fs::read_to_string(dir.path().join("out/reports.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.lines().next().unwrap().starts_with(
        "model,neurons,epochs,seed,perturbation,r2,mse,tail_mse_p90,params,flops_total,wall_seconds,ks_statistic,ks_p"
    ));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);

    let second = ok(dir.path(), &["sweep", "--config", "exp.toml"]);
    assert!(second.contains("0 groups trained, 4 cached"), "{second}");
    let again = std::fs::read_to_string(dir.path().join("out/reports.csv")).unwrap();
    assert_eq!(csv, again);

    std::fs::write(dir.path().join("meter.csv"), "run_id,joules\n").unwrap();
    let report = ok(dir.path(), &["report", "--dir", "out", "--energy", "meter.csv"]);
    assert!(report.contains("8 report rows"), "{report}");
}

#[test]
fn perturb_then_evaluate_reports_ks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--rows", "400", "--out", "ds.json"]);
    ok(d, &["train", "--dataset", "ds.json", "--model", "ncp", "--neurons", "6", "--epochs", "2", "--out", "ck.json"]);
    ok(d, &["perturb", "--dataset", "ds.json", "--kind", "drift", "--epsilon", "0.05", "--out", "drift.json"]);
    let report: serde_json::Value =
        serde_json::from_str(&ok(d, &["evaluate", "--dataset", "drift.json", "--checkpoint", "ck.json"])).unwrap();

    let clean = Dataset::load(&d.join("ds.json")).unwrap();
    let moved = Dataset::load(&d.join("drift.json")).unwrap();
    let test = clean.split().unwrap().test.clone();
    let expect = ks_2samp(&moved.target[test.clone()], &clean.target[test]).unwrap();
    assert_eq!(report["ks_statistic"].as_f64().unwrap(), expect.statistic);
    assert_eq!(report["ks_p"].as_f64().unwrap(), expect.p_value);
    assert_eq!(report["perturbation"], "drift:label@0.05");
}

#[test]
fn raw_sites_preprocess() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--sites-dir", "sites", "--rows", "300", "--sites", "6", "--units-per-site", "1"]);
    let out = ok(d, &["preprocess", "--input", "sites", "--cell-map", "sites/cell_map.csv", "--out", "ds.json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["units"].as_array().unwrap().len(), 6);
    let ds = Dataset::load(&d.join("ds.json")).unwrap();
    assert_eq!(ds.len(), 300);
    assert!(ds.scaler.is_some());
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "output_dir = \"o\"\n[dataset]\nsource = \"synthetic\"\nrows = 10\n").unwrap();
    let out = ncpwatt(d, &["sweep", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.rows"));

    ok(d, &["synth", "--rows", "200", "--out", "ds.json"]);
    let out = ncpwatt(d, &["train", "--dataset", "ds.json", "--model", "gru", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.join("broken.json"), "{").unwrap();
    let out = ncpwatt(d, &["train", "--dataset", "broken.json", "--model", "ncp", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(3));

    let out = ncpwatt(
        d,
        &["train", "--dataset", "ds.json", "--model", "lstm", "--epochs", "2", "--lr", "1e300", "--clip", "none", "--out", "x.json"],
    );
    assert_eq!(out.status.code(), Some(4));
}
