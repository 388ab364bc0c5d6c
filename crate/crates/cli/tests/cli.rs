use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bidex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bidex"))
        .args(args)
        .env("BIDEX_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bidex(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bidex(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "sim": {"episode_length": 30},
  "ppo": {"num_envs": 4, "hidden": [16], "total_iterations": 3, "checkpoint_interval": 2},
  "dagger": {"points": 32, "num_envs": 4, "rollout_steps": 4, "minibatch_size": 16, "hidden": [16],
             "encoder": {"point_layers": [8, 8], "post_layers": [16, 16]},
             "total_iterations": 3, "checkpoint_interval": 2},
  "bc": {"epochs": 3, "hidden": [16], "hold_steps": 2},
  "eval": {"n_episodes": 2}
}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
    group: String,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let demos = root.join("demos");
    ok(&["gen-demos", "--out", s(&demos), "--count", "6", "--templates", "pour", "--seed", "4"]);
    let manifest = root.join("tasks").join("tasks.json");
    ok(&["build-tasks", "--dataset", s(&demos), "--out", s(&manifest), "--config", s(&config)]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    let group = m["groups"].as_object().unwrap().keys().next().unwrap().clone();
    Workspace {
        _dir: dir,
        root,
        config,
        manifest,
        group,
    }
}

#[test]
fn gen_demos_is_deterministic_and_complete() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["gen-demos", "--out", s(&a), "--count", "10", "--seed", "7"]);
    ok(&["gen-demos", "--out", s(&b), "--count", "10", "--seed", "7"]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let demos = m["demos"].as_array().unwrap();
    assert_eq!(demos.len(), 10);
    for e in demos {
        let f = e["file"].as_str().unwrap();
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(code(&["gen-demos", "--out", s(&a), "--templates", "stir"]), 1);
}

#[test]
fn usage_and_environment_errors_exit_one() {
    assert_eq!(code(&["evaluate"]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_bidex"))
        .args(["gen-demos", "--out", "/tmp/never", "--count", "1"])
        .env("BIDEX_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn build_tasks_is_reproducible_and_rejects_invalid_datasets() {
    let w = workspace();
    let again = w.root.join("again.json");
    ok(&["build-tasks", "--dataset", s(&w.root.join("demos")), "--out", s(&again), "--config", s(&w.config)]);
    assert_eq!(fs::read(&w.manifest).unwrap(), fs::read(&again).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&again).unwrap()).unwrap();
    assert!(m["tasks"].as_object().unwrap().values().all(|t| t["split"].is_string()));
    assert!(w.root.join("config.json").exists());

    let bad = w.root.join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("x.json"), b"{\"demo_id\": 3}").unwrap();
    fs::write(bad.join("manifest.json"), br#"{"demos": [{"id": "x", "file": "x.json"}]}"#).unwrap();
    assert_eq!(code(&["build-tasks", "--dataset", s(&bad), "--out", s(&w.root.join("b.json"))]), 1);
}

#[test]
fn teacher_resume_matches_uninterrupted_run() {
    let w = workspace();
    let (full, part) = (w.root.join("full"), w.root.join("part"));
    let base = ["train-teacher", "--manifest", s(&w.manifest), "--group", &w.group, "--config", s(&w.config)];
    let mut args = base.to_vec();
    args.extend(["--out", s(&full)]);
    ok(&args);
    let mut args = base.to_vec();
    args.extend(["--out", s(&part), "--iterations", "2"]);
    ok(&args);
    let mut args = base.to_vec();
    args.extend(["--out", s(&part), "--resume"]);
    ok(&args);
    for f in ["left.ckpt", "right.ckpt", "trainer.ckpt"] {
        assert!(fs::read(full.join(f)).unwrap() == fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn full_pipeline_with_variants() {
    let w = workspace();
    let cfg = s(&w.config);
    let m = s(&w.manifest);
    let teacher = w.root.join("teacher");
    ok(&["train-teacher", "--manifest", m, "--group", &w.group, "--out", s(&teacher), "--config", cfg]);
    let central = w.root.join("central");
    ok(&["train-teacher", "--manifest", m, "--group", &w.group, "--out", s(&central), "--config", cfg, "--variant", "centralized-ppo"]);
    assert!(central.join("joint.ckpt").exists());
    let bc = w.root.join("bc");
    ok(&["train-teacher", "--manifest", m, "--group", &w.group, "--out", s(&bc), "--config", cfg, "--variant", "bc"]);

    let student = w.root.join("student");
    ok(&["distill", "--manifest", m, "--teachers", s(&teacher), "--out", s(&student), "--config", cfg]);
    let k0 = w.root.join("student_k0");
    ok(&["distill", "--manifest", m, "--teachers", s(&teacher), "--out", s(&k0), "--config", cfg, "--k", "0"]);
    assert_eq!(code(&["distill", "--manifest", m, "--teachers", s(&bc), "--out", s(&k0), "--config", cfg]), 1);

    for ckpt in [&teacher, &bc, &student, &central, &k0] {
        let out = ckpt.with_extension("eval");
        let mut args = vec!["evaluate", "--manifest", m, "--checkpoint", s(ckpt), "--out", s(&out)];
        // evaluation must see the configuration the checkpoint was made with
        let effective = ckpt.join("config.json");
        args.extend(["--config", s(&effective)]);
        let table = ok(&args);
        assert!(table.contains("train"));
        let csv = fs::read_to_string(out.join("report.csv")).unwrap();
        assert!(csv.starts_with("split,task_id,threshold,r1,r2,n"));
        for split in ["train", "test_comb", "test_new"] {
            let m: serde_json::Value = serde_json::from_slice(&fs::read(&w.manifest).unwrap()).unwrap();
            if m["split"][split].as_array().unwrap().is_empty() {
                continue;
            }
            assert!(csv.lines().any(|l| l.starts_with(split)), "{split} missing");
        }
    }

    let swept = w.root.join("swept");
    ok(&["evaluate", "--manifest", m, "--checkpoint", s(&teacher), "--out", s(&swept), "--config", s(&teacher.join("config.json")), "--sweep"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(swept.join("report.json")).unwrap()).unwrap();
    let thresholds: std::collections::BTreeSet<String> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["threshold"].to_string())
        .collect();
    assert_eq!(thresholds.len(), 3);

    // a teacher evaluated under a different configuration is rejected
    assert_eq!(
        code(&["evaluate", "--manifest", m, "--checkpoint", s(&teacher), "--out", s(&swept), "--config", cfg, "--no-bonus"]),
        1
    );

    let log = fs::read_dir(w.root.join("teacher.eval").join("episodes"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let dump = w.root.join("dump.csv");
    ok(&["replay", "--log", s(&log), "--out", s(&dump)]);
    let rows = fs::read_to_string(&dump).unwrap().lines().count() - 1;
    assert_eq!(rows, 2 * 30);
    let text = ok(&["replay", "--log", s(&log), "--format", "text"]);
    assert_eq!(text.lines().count(), rows + 1);
    assert_eq!(code(&["replay", "--log", s(&w.root.join("missing.jsonl"))]), 1);
}
