use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn unipatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unipatch"))
        .args(args)
        .env_remove("UNIPATCH_THREADS")
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, spec: &str, seed: &str) {
    json(&unipatch(&["--gen-synthetic", spec, "--out", path(dir), "--seed", seed]));
}

#[test]
fn generated_corpus_reproduces_the_target_rate() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    let summary = json(&unipatch(&["--gen-synthetic", "video:0.629:8:448x448", "--out", path(&clip), "--seed", "7"]));
    assert_eq!(summary["sites_per_plane"], 196);

    let report = json(&unipatch(&["--input", path(&clip), "--kind", "video", "--seed", "7"]));
    let rate = report["rate"].as_f64().unwrap();
    assert!((rate - 0.55).abs() <= 0.02, "rate {rate}");
    assert_eq!(rate, summary["expected_rate"].as_f64().unwrap());
    assert_eq!(report["tokens_before"], 8 * 784);
    assert_eq!(report["tokens_after_merge"], 8 * 196);
    assert_eq!(report["projector_output_shape"][0], report["tokens_after_prune"]);
}

#[test]
fn reports_are_deterministic_apart_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("scan.raw");
    gen(&vol, "volume:0.5:4:64x64", "3");
    let run = || {
        let mut v = json(&unipatch(&["--input", path(&vol), "--kind", "volume", "--seed", "3"]));
        v.as_object_mut().unwrap().remove("timings_ms");
        v
    };
    assert_eq!(run(), run());
}

#[test]
fn report_can_go_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("scan.raw");
    let out = dir.path().join("report.json");
    gen(&vol, "volume:0.25:3:64x64", "0");
    let status = unipatch(&["--input", path(&vol), "--kind", "volume", "--out", path(&out)]);
    assert!(status.status.success());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["input_kind"], "volume");
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = unipatch(&["--input", path(&dir.path().join("none.pgm")), "--kind", "image"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.pgm"));

    let bad = dir.path().join("bad.pgm");
    std::fs::write(&bad, b"P5\n4 4\n255\n\x01").unwrap();
    assert_eq!(unipatch(&["--input", path(&bad), "--kind", "image"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.pgm");
    std::fs::write(&img, b"P5\n1 1\n255\n\x01").unwrap();
    for args in [
        vec!["--input", path(&img), "--kind", "image", "--tau", "-1"],
        vec!["--input", path(&img), "--kind", "image", "--patch", "0"],
        vec!["--input", path(&img), "--kind", "hologram"],
        vec!["--input", path(&img), "--kind", "image", "--desk-config", "2,7,2"],
        vec!["--input", path(&img)],
        vec!["--bogus"],
        vec!["--gen-synthetic", "image:0.5:1:32x32", "--out", path(&img)],
    ] {
        assert_eq!(unipatch(&args).status.code(), Some(3), "{args:?}");
    }
    let threads = Command::new(env!("CARGO_BIN_EXE_unipatch"))
        .args(["--input", path(&img), "--kind", "image"])
        .env("UNIPATCH_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(3));
}

#[test]
fn verify_rope_suite_passes() {
    let out = unipatch(&["verify", "--suite", "rope", "--seed", "2"]);
    let summary = json(&out);
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["suites"][0]["name"], "rope");
    assert_eq!(unipatch(&["verify", "--suite", "nope"]).status.code(), Some(3));
}

#[test]
fn glob_batch_writes_one_report_per_input() {
    let dir = tempfile::tempdir().unwrap();
    for (name, seed) in [("a.raw", "1"), ("b.raw", "2")] {
        gen(&dir.path().join(name), "volume:0.5:3:64x64", seed);
    }
    let reports = dir.path().join("reports");
    let pattern = format!("{}/*.raw", path(dir.path()));
    let index = json(&unipatch(&["--glob", &pattern, "--kind", "volume", "--out", path(&reports)]));
    assert_eq!(index.as_array().unwrap().len(), 2);
    for stem in ["a", "b"] {
        let text = std::fs::read_to_string(reports.join(format!("{stem}.json"))).unwrap();
        let report: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(report["planes"], 3);
    }

    let none = format!("{}/*.nothing", path(dir.path()));
    let out = unipatch(&["--glob", &none, "--kind", "volume", "--out", path(&reports)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_tau_prints_a_monotone_table() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    gen(&clip, "video:0.5:4:64x64", "0");
    let table = json(&unipatch(&["--input", path(&clip), "--kind", "video", "--bench-tau", "0,0.05,0.1,0.5"]));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["drift"], 0.0);
    let rates: Vec<f64> = rows.iter().map(|r| r["rate"].as_f64().unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
}
