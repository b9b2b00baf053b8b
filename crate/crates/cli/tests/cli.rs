use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn reid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}: {stderr}", out.status.code());
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn synth_train_eval_extract_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();

    let out = ok(&reid(&["synth", "--root", data_s, "--ids", "8", "--seed", "3"]));
    assert!(out.contains("wrote 32 tracklets"), "{out}");

    let root = format!("dataset.root={data_s:?}");
    let common = [
        "--config", cfg, "--out", run_s, "--set", &root,
        "--set", "schedule.total_epochs=2", "--set", "schedule.warmup_epochs=1",
        "--set", "schedule.decay_epochs=[]",
    ];
    let out = ok(&reid(&[&["train"], &common[..]].concat()));
    assert!(out.contains("trained 2 epochs"), "{out}");
    for f in ["config.toml", "metrics.jsonl", "last.safetensors", "best.safetensors"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let out = ok(&reid(&[&["eval"], &common[..]].concat()));
    assert!(out.contains("rank-1") && out.contains("mAP"), "{out}");
    let out = ok(&reid(&[&["eval"], &common[..], &["--set", "clip_len=8"]].concat()));
    assert!(out.contains("T=8"), "{out}");
    for t in [4, 8] {
        let text = std::fs::read_to_string(run.join(format!("eval_t{t}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["protocol"]["clip_len"], t);
        assert_eq!(v["protocol"]["evaluated_queries"], 32);
    }

    let out = ok(&reid(&[&["extract", "--split", "train"], &common[..]].concat()));
    assert!(out.contains("wrote 32 features"), "{out}");
    assert!(run.join("features_train.bin").exists() && run.join("features_train.jsonl").exists());

    ok(&reid(&["report", "--run", run_s]));
    let md = std::fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("| 2 |"), "{md}");
    assert!(std::fs::read_to_string(run.join("loss.svg")).unwrap().starts_with("<svg"));
    assert!(run.join("rank1.svg").exists());
}

#[test]
fn params_prints_counts() {
    let out = ok(&reid(&["params", "--config", smoke_config().to_str().unwrap()]));
    assert!(out.contains("encoder") && out.contains("total") && out.contains("MB"), "{out}");
}

#[test]
fn missing_config_names_the_path() {
    let out = reid(&["train", "--config", "missing.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));
}

#[test]
fn bad_override_is_reported() {
    let out = reid(&["params", "--set", "model.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.no_such_key"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(reid(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(reid(&["extract", "--split", "sideways"]).status.code(), Some(2));
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
}
