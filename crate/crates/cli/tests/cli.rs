use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tangram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tangram")).args(args).env_remove("TANGRAM_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tangram(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../objects")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())).collect();
    v.sort();
    v
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["--seed", "1", "gen", "--mode", "random", "--count", "10", "--out", s(&a)]);
    ok(&["--seed", "1", "gen", "--mode", "random", "--count", "10", "--out", s(&b)]);
    let files = dir_bytes(&a);
    assert_eq!(files.len(), 11);
    assert_eq!(files, dir_bytes(&b));
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["objects"][3]["seed"], 4);
}

#[test]
fn seed_falls_back_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tangram"))
        .args(["gen", "--mode", "random", "--count", "1", "--out", s(t.path())])
        .env("TANGRAM_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read_json(&t.path().join("manifest.json"))["objects"][0]["seed"], 42);
}

#[test]
fn gravity_manifest_is_more_compact() {
    let t = tempfile::tempdir().unwrap();
    let (r, g) = (t.path().join("r"), t.path().join("g"));
    ok(&["gen", "--mode", "random", "--count", "20", "--out", s(&r)]);
    ok(&["gen", "--mode", "gravity", "--count", "20", "--out", s(&g)]);
    let mean = |d: &Path| read_json(&d.join("manifest.json"))["mean_perimeter"].as_f64().unwrap();
    assert!(mean(&g) < mean(&r), "gravity {} vs random {}", mean(&g), mean(&r));
}

#[test]
fn usage_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&tangram(&["gen", "--mode", "random", "--count", "0", "--out", s(t.path())])), 2);
    let blocker = t.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let nested = blocker.join("sub");
    assert_eq!(code(&tangram(&["gen", "--mode", "random", "--count", "1", "--out", s(&nested)])), 2);
    assert_eq!(code(&tangram(&["frobnicate"])), 2);
    assert_eq!(code(&tangram(&["eval", "--policy", "oracle", "--family", "nope", "--out", s(t.path())])), 2);
    assert_eq!(code(&tangram(&["eval", "--policy", "ppo", "--family", "random", "--out", s(t.path())])), 2);
}

#[test]
fn invalid_config_key_is_named() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "num_envs = 2\nlearning_rate = 0.1\n").unwrap();
    let out = tangram(&["train-ppo", "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    fs::write(&cfg, "clip_eps = 1.5\n").unwrap();
    let out = tangram(&["train-ppo", "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip_eps"));
}

#[test]
fn tiny_training_smoke_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("tiny.toml");
    fs::write(&cfg, "num_envs = 2\ntotal_updates = 10\nplateau_window = 2\n").unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["--deterministic", "train-ppo", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["--deterministic", "train-ppo", "--config", s(&cfg), "--out", s(&b)]);
    let csv = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("train_log.csv")).unwrap());
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    let ckpts = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("ckpt_")).count();
    assert_eq!(ckpts, 1);
    let switches: Vec<&&str> = rows.iter().filter(|r| r.split(',').nth(2) == Some("1")).collect();
    assert_eq!(switches.len(), 1, "{csv}");
    assert!(switches[0].contains("local_parts"));
    assert!(rows.last().unwrap().contains("global"));
    let summary = read_json(&a.join("summary.json"));
    assert!(summary["stage_switch_update"].as_u64().is_some());

    // The checkpoint loads for evaluation; a non-checkpoint is an artifact mismatch.
    let e = t.path().join("e");
    let ckpt = a.join("ckpt_000010.bin");
    ok(&["eval", "--policy", "ppo", "--checkpoint", s(&ckpt), "--family", "random", "--n", "2", "--out", s(&e)]);
    let report = read_json(&e.join("report.json"));
    assert_eq!(report["provenance"]["checkpoint_hash"].as_str().unwrap().len(), 64);
    let out = tangram(&["eval", "--policy", "bc", "--checkpoint", s(&cfg), "--family", "random", "--n", "2", "--out", s(&e)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn oracle_eval_meets_the_realizability_bound() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["eval", "--policy", "oracle", "--family", "Random", "--n", "20", "--out", s(&a)]);
    let report = read_json(&a.join("report.json"));
    let row = &report["rows"][0];
    assert_eq!(row["n_episodes"], 20);
    assert!(row["mean_rela"].as_f64().unwrap() >= 0.95, "{row}");
    ok(&["eval", "--policy", "random", "--family", "random", "--n", "20", "--seed", "3", "--out", s(&a)]);
    ok(&["eval", "--policy", "random", "--family", "random", "--n", "20", "--seed", "3", "--out", s(&b)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn solve_writes_trajectory_and_frames() {
    let entry = fs::read_dir(corpus().join("h-normal")).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|x| x == "json")).unwrap();
    let t = tempfile::tempdir().unwrap();
    ok(&["solve", "--target", s(&entry), "--mode", "greedy", "--out", s(t.path())]);
    let traj = fs::read_to_string(t.path().join("trajectory.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 7);
    for line in traj.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["reward"].as_f64().unwrap() >= 0.0);
    }
    let frames = fs::read_dir(t.path().join("frames")).unwrap().count();
    assert_eq!(frames, 8);
    let first = fs::read(t.path().join("frames/frame_0.pgm")).unwrap();
    assert!(first.starts_with(b"P5\n120 120\n255\n"));
}

#[test]
fn render_and_bad_target() {
    let t = tempfile::tempdir().unwrap();
    let obj = t.path().join("o");
    ok(&["gen", "--mode", "random", "--count", "1", "--out", s(&obj)]);
    let pgm = t.path().join("sil.pgm");
    ok(&["render", "--target", s(&obj.join("obj_00000.json")), "--out", s(&pgm)]);
    assert_eq!(fs::read(&pgm).unwrap().len(), 15 + 120 * 120);
    let bad = t.path().join("bad.json");
    fs::write(&bad, r#"{"version": 1, "pieces": []}"#).unwrap();
    assert_eq!(code(&tangram(&["render", "--target", s(&bad), "--out", s(&pgm)])), 3);
}

#[test]
fn env_check_passes() {
    let out = ok(&["env-check"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("ok")).count(), 4, "{text}");
}
