use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forge::config::ForgeConfig;

fn forge(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_forge"));
    cmd.args(args).env_remove("FORGE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn forge")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn last_json_line(bytes: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(bytes);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("a JSON line");
    serde_json::from_str(line).unwrap()
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn small_config(dir: &Path, seed: u64) -> PathBuf {
    let mut cfg = ForgeConfig::toy();
    cfg.seed = seed;
    cfg.scale = 0.01;
    let path = dir.join("small.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    path
}

#[test]
fn selftest_passes() {
    let o = forge(&["selftest"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    assert!(stdout(&o).lines().count() >= 10);
}

#[test]
fn bad_flags_exit_two() {
    for args in [&["train"][..], &["train", "--stage", "4"], &["frobnicate"], &["eval", "--task", "dance", "--ckpt", "x"]] {
        let o = forge(args, &[]);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(last_json_line(&o.stderr)["error"], "usage");
    }
}

#[test]
fn invalid_config_exits_three_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(ForgeConfig::toy()).unwrap();
    v["stage2"]["batch_size"] = 0.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let o = forge(&["train", "--stage", "2", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = last_json_line(&o.stderr);
    assert_eq!(err["error"], "config");
    assert_eq!(err["field"], "stage2.batch_size");

    v["stage2"]["batch_size"] = 16.into();
    v["model"]["encoder"]["warp"] = 1.into();
    std::fs::write(&path, v.to_string()).unwrap();
    let o = forge(&["train", "--stage", "2", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(last_json_line(&o.stderr)["field"], "model.encoder.warp");
}

#[test]
fn bad_seed_override_is_a_config_error() {
    let o = forge(&["train", "--stage", "1"], &[("FORGE_SEED", "minus one")]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(last_json_line(&o.stderr)["field"], "FORGE_SEED");
}

#[test]
fn curate_is_byte_deterministic_and_writes_stats() {
    let dir = tempfile::tempdir().unwrap();
    let input = repo("data/sample_raw.jsonl");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let stats = dir.path().join(format!("{name}.stats"));
        let o = forge(
            &[
                "curate",
                "--rules",
                "stage3",
                "--in",
                input.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--stats",
                stats.to_str().unwrap(),
            ],
            &[],
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(&out).unwrap(), stats, last_json_line(&o.stdout))
    };
    let (a, stats, report) = run("a.jsonl");
    let (b, _, _) = run("b.jsonl");
    assert_eq!(a, b);
    assert_eq!(report["input"], 100);
    assert_eq!(report["output"].as_u64().unwrap() as usize, a.iter().filter(|&&c| c == b'\n').count());
    for f in ["resolution.csv", "aspect_ratio.csv", "cumulative_resolution.csv", "stats.json"] {
        assert!(stats.join(f).is_file(), "{f}");
    }
}

#[test]
fn stats_command_writes_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let input = repo("data/sample_raw.jsonl");
    let out = dir.path().join("h");
    let o = forge(&["stats", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("resolution.csv")).unwrap();
    assert!(csv.starts_with("lo,hi,count\n"));
    let total: u64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 100);
}

#[test]
fn train_then_eval_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5);
    let cfg = cfg.to_str().unwrap();
    let s2 = dir.path().join("s2.ckpt");
    let o = forge(&["train", "--stage", "2", "--config", cfg, "--out", s2.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = last_json_line(&o.stdout);
    assert_eq!(summary["stage"], 2);
    assert_eq!(summary["steps"], 15);
    let metrics = std::fs::read_to_string(dir.path().join("s2.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 15);

    let s3 = dir.path().join("s3.ckpt");
    let o = forge(
        &["train", "--stage", "3", "--config", cfg, "--init", s2.to_str().unwrap(), "--out", s3.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    for (task, ckpt) in [("retrieval", &s2), ("classify", &s2), ("ground", &s3)] {
        let report = dir.path().join(format!("{task}.json"));
        let o = forge(
            &["eval", "--task", task, "--ckpt", ckpt.to_str().unwrap(), "--config", cfg, "--report", report.to_str().unwrap()],
            &[],
        );
        assert_eq!(o.status.code(), Some(0), "{task}: {}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(v["task"], task);
    }
}

#[test]
fn training_is_deterministic_and_seed_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let cfg = cfg.to_str().unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let env: Vec<(&str, &str)> = seed.map(|s| ("FORGE_SEED", s)).into_iter().collect();
        let o = forge(&["train", "--stage", "1", "--config", cfg, "--out", out.to_str().unwrap()], &env);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(&out).unwrap(), std::fs::read(dir.path().join(format!("{name}.metrics.jsonl"))).unwrap())
    };
    let a = run("a.ckpt", None);
    assert_eq!(a, run("b.ckpt", None));
    assert_eq!(a, run("c.ckpt", Some("0")));
    assert_ne!(a, run("d.ckpt", Some("1")));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let o = forge(&["eval", "--task", "retrieval", "--ckpt", "/nonexistent/x.ckpt"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(last_json_line(&o.stderr)["error"], "runtime");
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().filter(|l| l.starts_with('{')).count(), 1);
}
