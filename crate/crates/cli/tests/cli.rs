use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn speckv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speckv")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8")
}

/// The desk preset cut down to a couple of thousand tokens.
fn small_config(dir: &TempDir) -> PathBuf {
    let text = stdout(&speckv(&["config", "desk"])).replace("max_tokens = 50000", "max_tokens = 2000");
    let p = dir.path().join("small.conf");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_passes_every_check() {
    let o = speckv(&["validate"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.starts_with("PASS") || l.ends_with("checks passed")), "{out}");
    let json = speckv(&["validate", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert!(v.as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn simulate_is_deterministic_and_seeded() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let a = speckv(&["simulate", "--config", s(&cfg)]);
    let b = speckv(&["simulate", "--config", s(&cfg)]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    assert!(out.starts_with("metric,value\nhit_rate,"));
    assert!(out.contains("\ntokens_committed,2000\n"));
    let c = speckv(&["simulate", "--config", s(&cfg), "--seed", "9"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn simulate_writes_json_to_file() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let out = dir.path().join("m.json");
    let o = speckv(&["simulate", "--config", s(&cfg), "--format", "json", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["tokens_committed"], 2000);
    assert!(v["hit_rate"].as_f64().unwrap() > 0.9);
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "model.layers = 8\nbogus = 1\n").unwrap();
    let o = speckv(&["simulate", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    fs::write(&bad, "serving.batch_size = 0\n").unwrap();
    assert_eq!(speckv(&["simulate", "--config", s(&bad)]).status.code(), Some(2));
    let missing = dir.path().join("missing.conf");
    assert_eq!(speckv(&["simulate", "--config", s(&missing)]).status.code(), Some(2));
    assert_eq!(speckv(&["scale", "--engines", "x"]).status.code(), Some(2));
    assert_eq!(speckv(&["codec-bench", "--scheme", "zstd"]).status.code(), Some(2));
    assert_eq!(speckv(&["simulate"]).status.code(), Some(2));
}

#[test]
fn sweep_k_has_one_row_per_arm() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let o = speckv(&["sweep-k", "--config", s(&cfg), "--arms", "1,4,16"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("k,hit_rate,"));
    let hit = |l: &str| l.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(hit(lines[1]) < hit(lines[3]));
}

#[test]
fn scale_table_matches_reference_points() {
    let o = speckv(&["scale", "--engines", "1..4"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let tp: Vec<f64> = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(tp.len(), 4);
    for (got, want) in tp.iter().zip([412.0, 798.0, 1156.0, 1487.0]) {
        assert!((got - want).abs() / want < 0.05);
    }
    let json = speckv(&["scale", "--engines", "2,3", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn codec_bench_reads_profiles() {
    let o = speckv(&["codec-bench", "--scheme", "int8_delta_rle", "--profile", "default:6", "--blocks", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 8);
    let mean: f64 = out.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((mean - 3.2).abs() < 0.4, "{out}");

    let dir = TempDir::new().unwrap();
    let file = dir.path().join("profile.txt");
    fs::write(&file, "3.0\n3.0\n").unwrap();
    let o = speckv(&["codec-bench", "--scheme", "int8", "--profile", s(&file)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 4);
    let o = speckv(&["codec-bench", "--scheme", "int8", "--profile", "12"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generated_trace_replays_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let trace = dir.path().join("t.trace");
    assert_eq!(speckv(&["gen-trace", "--config", s(&cfg), "--out", s(&trace)]).status.code(), Some(0));
    assert!(fs::read_to_string(&trace).unwrap().starts_with("speckv-trace v1\n"));
    let replay = dir.path().join("replay.conf");
    let text = fs::read_to_string(&cfg).unwrap() + &format!("workload.trace = {}\n", s(&trace));
    fs::write(&replay, text).unwrap();
    let a = speckv(&["simulate", "--config", s(&cfg)]);
    let b = speckv(&["simulate", "--config", s(&replay)]);
    assert_eq!(b.status.code(), Some(0), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(a.stdout, b.stdout);
}
