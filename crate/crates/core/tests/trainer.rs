mod common;

use std::path::Path;

use common::{smoke_config, synth};
use reid_core::candle_core::Device;
use reid_core::checkpoint::load_checkpoint;
use reid_core::config::RunConfig;
use reid_core::datasets::BatchSpec;
use reid_core::optim::lr_at_epoch;
use reid_core::trainer::{train, LogRecord, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG};
use reid_core::Error;

fn short(root: &Path, out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = smoke_config(root, out);
    cfg.schedule.total_epochs = epochs;
    cfg.schedule.warmup_epochs = 1;
    cfg.schedule.decay_epochs = vec![2];
    cfg.train.val_every = 1;
    cfg
}

fn log_records(dir: &Path) -> Vec<LogRecord> {
    std::fs::read_to_string(dir.join(METRICS_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn same_weights(a: &Path, b: &Path) {
    let (a, b) = (load_checkpoint(a, &Device::Cpu).unwrap(), load_checkpoint(b, &Device::Cpu).unwrap());
    assert_eq!(a.meta.epoch, b.meta.epoch);
    assert_eq!(a.meta.optimizer_step, b.meta.optimizer_step);
    assert_eq!(a.centers, b.centers);
    for (name, t) in a.model.iter().chain(&a.optim) {
        let u = b.model.get(name).or_else(|| b.optim.get(name)).unwrap();
        let (x, y) = (t.flatten_all().unwrap(), u.flatten_all().unwrap());
        assert_eq!(x.to_vec1::<f32>().unwrap(), y.to_vec1::<f32>().unwrap(), "{name}");
    }
}

#[test]
fn run_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 8, 2);
    let out = dir.path().join("run");
    let outcome = train(short(&data, &out, 3)).unwrap();
    assert_eq!(outcome.epochs_run, 3);
    assert!(out.join("config.toml").exists());
    assert!(outcome.last_checkpoint.exists());
    assert_eq!(outcome.best_checkpoint.as_deref(), Some(out.join(BEST_CHECKPOINT).as_path()));
    assert_eq!(outcome.history.validations.len(), 3);

    let echoed = RunConfig::from_path(&out.join("config.toml"), &[]).unwrap();
    assert_eq!(echoed, short(&data, &out, 3));

    let cfg = short(&data, &out, 3);
    let mut steps = 0;
    for rec in log_records(&out) {
        match rec {
            LogRecord::Step {
                epoch,
                lr,
                total,
                id,
                rll,
                center,
                erase_attn,
                elapsed_secs,
                ..
            } => {
                steps += 1;
                assert_eq!(lr, lr_at_epoch(epoch, &cfg.schedule).unwrap());
                let recomposed = id + rll + cfg.loss.beta * center + erase_attn;
                assert!((total - recomposed).abs() < 1e-6);
                assert!(elapsed_secs.is_none(), "deterministic runs carry no wall clock");
            }
            LogRecord::Validation { rank1, map, .. } => {
                assert!((0.0..=1.0).contains(&rank1) && (0.0..=1.0).contains(&map));
            }
        }
    }
    assert_eq!(steps, outcome.history.epochs.iter().map(|e| e.steps).sum::<usize>());

    let ckpt = load_checkpoint(&outcome.last_checkpoint, &Device::Cpu).unwrap();
    assert_eq!(ckpt.meta.epoch, 3);
    assert_eq!(ckpt.meta.class_ids, (1..=8).collect::<Vec<i64>>());
    assert_eq!(ckpt.meta.model.head.num_classes, 8);
    assert_eq!(ckpt.meta.optimizer_step, steps as u64);
    let centers = ckpt.centers.unwrap();
    assert_eq!((centers.num_classes(), centers.dim()), (8, 128));
    // every identity is drawn each epoch, so every center has moved
    for c in 0..8 {
        assert!(centers.row(c).iter().any(|&v| v != 0.0));
    }
}

#[test]
fn identical_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 8, 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(short(&data, &a, 2)).unwrap();
    train(short(&data, &b, 2)).unwrap();
    assert_eq!(
        std::fs::read(a.join(METRICS_LOG)).unwrap(),
        std::fs::read(b.join(METRICS_LOG)).unwrap()
    );
    same_weights(&a.join(LAST_CHECKPOINT), &b.join(LAST_CHECKPOINT));
}

#[test]
fn resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 8, 5);
    let full = dir.path().join("full");
    train(short(&data, &full, 4)).unwrap();

    let split = dir.path().join("split");
    train(short(&data, &split, 2)).unwrap();
    let mut cfg = short(&data, &split, 4);
    cfg.train.resume = Some(split.join(LAST_CHECKPOINT));
    let mut trainer = Trainer::new(cfg).unwrap();
    assert_eq!(trainer.epoch(), 2);
    assert_eq!(trainer.history().epochs.len(), 2);
    let outcome = trainer.run().unwrap();
    assert_eq!(outcome.epochs_run, 4);

    same_weights(&full.join(LAST_CHECKPOINT), &split.join(LAST_CHECKPOINT));
    assert_eq!(log_records(&full), log_records(&split));
}

#[test]
fn resume_rejects_other_identities() {
    let dir = tempfile::tempdir().unwrap();
    let (d8, d9) = (dir.path().join("d8"), dir.path().join("d9"));
    synth(&d8, 8, 1);
    synth(&d9, 9, 1);
    let out = dir.path().join("run");
    train(short(&d8, &out, 1)).unwrap();
    let mut cfg = short(&d9, &dir.path().join("other"), 2);
    cfg.train.resume = Some(out.join(LAST_CHECKPOINT));
    assert!(matches!(Trainer::new(cfg), Err(Error::Checkpoint(_))));
}

#[test]
fn transfer_init_resizes_the_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let (d8, d10) = (dir.path().join("d8"), dir.path().join("d10"));
    synth(&d8, 8, 1);
    synth(&d10, 10, 2);
    let out = dir.path().join("a");
    train(short(&d8, &out, 1)).unwrap();

    let mut cfg = short(&d10, &dir.path().join("b"), 1);
    cfg.train.init_checkpoint = Some(out.join(LAST_CHECKPOINT));
    let trainer = Trainer::new(cfg.clone()).unwrap();
    assert_eq!(trainer.model().num_classes(), 10);
    assert_eq!(trainer.epoch(), 0);
    let src = load_checkpoint(&out.join(LAST_CHECKPOINT), &Device::Cpu).unwrap();
    let mine = trainer.model().store().tensors();
    let key = src.model.keys().find(|k| k.starts_with("encoder.")).unwrap();
    assert_eq!(
        src.model[key].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        mine[key].flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );

    cfg.train.init_strict = true;
    assert!(Trainer::new(cfg).is_err());
}

#[test]
fn degenerate_setups_rejected() {
    assert!(BatchSpec::new(1, 4).is_err());
    assert!(BatchSpec::new(4, 1).is_err());
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 4, 0);
    // fewer identities than a batch needs
    assert!(matches!(
        Trainer::new(short(&data, &dir.path().join("r"), 1)),
        Err(Error::Config(_))
    ));
    let mut cfg = short(&data, &dir.path().join("r"), 1);
    cfg.batch.identities = 1;
    assert!(Trainer::new(cfg).is_err());
    let mut cfg = short(&data, &dir.path().join("r"), 1);
    cfg.dataset.root = dir.path().join("missing");
    assert!(Trainer::new(cfg).is_err());
}

#[test]
fn id_loss_falls_on_a_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let index = synth(&data, 8, 3);
    let mut cfg = smoke_config(&data, &dir.path().join("run"));
    cfg.train.val_every = 100;
    let mut trainer = Trainer::with_index(cfg, index).unwrap();
    let first = trainer.train_epoch().unwrap();
    let mut last = first.clone();
    for _ in 0..7 {
        last = trainer.train_epoch().unwrap();
    }
    assert_eq!(trainer.epoch(), 8);
    assert!(last.mean.id < 0.75 * first.first.id, "{} vs {}", last.mean.id, first.first.id);
    assert!(first.lr > 0.0 && last.lr == lr_at_epoch(8, &trainer.config().schedule).unwrap());
}
