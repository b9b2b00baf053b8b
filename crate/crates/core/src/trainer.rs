//! Training loop: identity-balanced batches, composite loss, Adam with the
//! warmup step schedule, center updates, periodic validation and checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{init_from_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::datasets::{pk_batch_stream, sample_training_clip, scan_dataset_with, Split, TrackletIndex};
use crate::evalkit::{run_protocol, EvalReport};
use crate::losses::{center_loss, compose, erase_attention_loss, id_loss, rll_loss, CenterBank, LossBundle, LossComponents};
use crate::model::ReidModel;
use crate::optim::{build_optimizer, lr_at_epoch, Adam};
use crate::seed;
use crate::transforms::{load_clip, ClipTensor};
use crate::{Error, Result};

const BATCH_STREAM: u64 = 0xba7c;
const CLIP_STREAM: u64 = 0xc11b;

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const METRICS_LOG: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// first batch of the epoch
    pub first: LossBundle,
    /// mean over the epoch's batches
    pub mean: LossBundle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub rank1: f64,
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub epochs: Vec<EpochSummary>,
    pub validations: Vec<ValidationRecord>,
}

impl MetricHistory {
    /// First validated epoch whose rank-1 reached `target`.
    pub fn first_epoch_reaching(&self, target: f64) -> Option<usize> {
        self.validations.iter().find(|v| v.rank1 >= target).map(|v| v.epoch)
    }

    pub fn best_rank1(&self) -> Option<f64> {
        self.validations.iter().map(|v| v.rank1).reduce(f64::max)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        lr: f64,
        total: f64,
        id: f64,
        rll: f64,
        center: f64,
        erase_attn: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        elapsed_secs: Option<f64>,
    },
    Validation {
        epoch: usize,
        rank1: f64,
        map: f64,
        #[serde(with = "rank_keys")]
        cmc: BTreeMap<usize, f64>,
    },
}

// Tagged enums buffer their fields, which loses the integer parsing of JSON
// object keys; do it by hand.
mod rank_keys {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

pub struct TrainOutcome {
    pub history: MetricHistory,
    pub epochs_run: usize,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    cfg: RunConfig,
    index: TrackletIndex,
    class_ids: Vec<i64>,
    class_of: BTreeMap<i64, usize>,
    model: ReidModel,
    optim: Adam,
    centers: CenterBank,
    epoch: usize,
    history: MetricHistory,
    log: Option<BufWriter<File>>,
    started: Instant,
}

impl Trainer {
    /// Scans the configured dataset and builds a trainer for it.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let index = scan_dataset_with(&cfg.dataset.root, cfg.dataset.layout, &cfg.dataset.scan_options())?;
        Self::with_index(cfg, index)
    }

    /// Builds the model (head sized to the training identities), applies
    /// transfer initialization or resumes, and opens the run directory.
    pub fn with_index(mut cfg: RunConfig, index: TrackletIndex) -> Result<Self> {
        cfg.validate()?;
        let class_ids = index.identities(Split::Train);
        if class_ids.len() < cfg.batch.identities {
            return Err(Error::config(format!(
                "training split has {} identities, batches need {}",
                class_ids.len(),
                cfg.batch.identities
            )));
        }
        if cfg.model.head.num_classes != class_ids.len() {
            log::info!(
                "classifier sized to {} training identities (config said {})",
                class_ids.len(),
                cfg.model.head.num_classes
            );
            cfg.model.head.num_classes = class_ids.len();
        }
        let class_of = class_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let mut model = ReidModel::new(&cfg.model, cfg.seed, &Device::Cpu)?;
        if let Some(path) = &cfg.train.init_checkpoint {
            let report = init_from_checkpoint(&mut model, path, cfg.train.init_strict)?;
            log::info!(
                "initialized {} tensors from {} ({} skipped)",
                report.loaded.len(),
                path.display(),
                report.skipped.len()
            );
        }
        let optim = build_optimizer(&model, &cfg.schedule, &cfg.adam)?;
        let centers = CenterBank::new(class_ids.len(), model.embed_dim(), cfg.train.center_lr);
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        let mut trainer = Self {
            cfg,
            index,
            class_ids,
            class_of,
            model,
            optim,
            centers,
            epoch: 0,
            history: MetricHistory::default(),
            log: None,
            started: Instant::now(),
        };
        if let Some(path) = trainer.cfg.train.resume.clone() {
            trainer.restore(&path)?;
        }
        let log_path = trainer.cfg.out_dir.join(METRICS_LOG);
        let file = OpenOptions::new()
            .create(true)
            .append(trainer.epoch > 0)
            .write(true)
            .truncate(trainer.epoch == 0)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        trainer.log = Some(BufWriter::new(file));
        Ok(trainer)
    }

    fn restore(&mut self, path: &Path) -> Result<()> {
        let ckpt = load_checkpoint(path, self.model.device())?;
        if ckpt.meta.class_ids != self.class_ids {
            return Err(Error::Checkpoint(format!(
                "{} was trained on a different identity set",
                path.display()
            )));
        }
        self.model.store().load(&ckpt.model, true)?;
        self.optim.load_state(&ckpt.optim, ckpt.meta.optimizer_step)?;
        self.centers = ckpt
            .centers
            .ok_or_else(|| Error::Checkpoint(format!("{} has no centers", path.display())))?;
        self.centers.learning_rate = self.cfg.train.center_lr;
        self.epoch = ckpt.meta.epoch;
        self.history = serde_json::from_value(ckpt.meta.extra["history"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad history: {e}", path.display())))?;
        log::info!("resumed from {} at epoch {}", path.display(), self.epoch);
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ReidModel {
        &self.model
    }

    pub fn index(&self) -> &TrackletIndex {
        &self.index
    }

    pub fn centers(&self) -> &CenterBank {
        &self.centers
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optim
    }

    pub fn class_ids(&self) -> &[i64] {
        &self.class_ids
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &MetricHistory {
        &self.history
    }

    fn write_log(&mut self, rec: &LogRecord) -> Result<()> {
        let path = self.cfg.out_dir.join(METRICS_LOG);
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(rec).expect("record serializes"))
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Runs one epoch of identity-balanced batches.
    pub fn train_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epoch + 1;
        let lr = lr_at_epoch(epoch, &self.cfg.schedule)?;
        self.optim.set_lr(lr);
        let seed = self.cfg.seed;
        let mut batch_rng = seed::rng_for(seed, &[BATCH_STREAM, epoch as u64]);
        let batches: Vec<Vec<(usize, i64)>> = {
            let records = self.index.records();
            pk_batch_stream(&self.index, self.cfg.batch, &mut batch_rng)?
                .map(|b| {
                    b.into_iter()
                        .map(|(r, pid)| {
                            let idx = records
                                .iter()
                                .position(|x| std::ptr::eq(x, r))
                                .expect("record from this index");
                            (idx, pid)
                        })
                        .collect()
                })
                .collect()
        };
        let mut sums = [0.0f64; 5];
        let mut first = None;
        for (step, batch) in batches.iter().enumerate() {
            let bundle = self.train_step(epoch, step, batch)?;
            first.get_or_insert(bundle);
            for (s, v) in sums.iter_mut().zip([bundle.total, bundle.id, bundle.rll, bundle.center, bundle.erase_attn]) {
                *s += v;
            }
            let elapsed_secs = (!self.cfg.deterministic).then(|| self.started.elapsed().as_secs_f64());
            self.write_log(&LogRecord::Step {
                epoch,
                step: self.optim.step_count(),
                lr,
                total: bundle.total,
                id: bundle.id,
                rll: bundle.rll,
                center: bundle.center,
                erase_attn: bundle.erase_attn,
                elapsed_secs,
            })?;
        }
        let n = batches.len() as f64;
        let summary = EpochSummary {
            epoch,
            lr,
            steps: batches.len(),
            first: first.expect("at least one batch"),
            mean: LossBundle {
                total: sums[0] / n,
                id: sums[1] / n,
                rll: sums[2] / n,
                center: sums[3] / n,
                erase_attn: sums[4] / n,
            },
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e}, loss {:.4} (id {:.4}, rll {:.4}, center {:.2}, erase {:.4})",
            summary.mean.total,
            summary.mean.id,
            summary.mean.rll,
            summary.mean.center,
            summary.mean.erase_attn
        );
        self.epoch = epoch;
        self.history.epochs.push(summary.clone());
        Ok(summary)
    }

    fn train_step(&mut self, epoch: usize, step: usize, batch: &[(usize, i64)]) -> Result<LossBundle> {
        let records = self.index.records();
        let t = self.cfg.clip_len;
        let transform = &self.cfg.transform;
        let seed = self.cfg.seed;
        let clips: Vec<ClipTensor> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &(idx, _))| {
                let mut rng = seed::rng_for(seed, &[CLIP_STREAM, epoch as u64, step as u64, i as u64]);
                let clip = sample_training_clip(&records[idx], t, &mut rng)?;
                let paths: Vec<&Path> = clip.frame_paths().collect();
                load_clip(&paths, transform, &mut rng)
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = batch.iter().map(|(_, pid)| self.class_of[pid]).collect();
        let device = self.model.device().clone();
        let input = ClipTensor::stack(&clips, &device)?;
        let erase = ClipTensor::stack_erase_labels(&clips, &device)?;

        let out = self.model.forward(&input, true)?;
        let feats = out.dml_features();
        let at_step = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} step {}: {m}", step + 1)),
            other => other,
        };
        let components = LossComponents {
            id: id_loss(&out.logits, &labels, self.cfg.loss.epsilon)?,
            rll: rll_loss(feats, &labels, &self.cfg.rll).map_err(at_step)?,
            center: center_loss(feats, &labels, &self.centers)?,
            erase_attn: erase_attention_loss(&out.scores, &erase)?,
        };
        let (total, bundle) = compose(&components, &self.cfg.loss).map_err(at_step)?;
        let grads = total.backward()?;
        self.optim.step(&grads)?;
        self.centers.update(&feats.detach(), &labels)?;
        Ok(bundle)
    }

    /// Retrieval evaluation under the configured protocol.
    pub fn validate(&self) -> Result<EvalReport> {
        run_protocol(
            &self.index,
            &self.model,
            &self.cfg.eval,
            self.cfg.clip_len,
            &self.cfg.transform,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new(self.model.spec());
        meta.epoch = self.epoch;
        meta.seed = self.cfg.seed;
        meta.optimizer_step = self.optim.step_count();
        meta.class_ids = self.class_ids.clone();
        meta.center_lr = self.centers.learning_rate;
        meta.extra = serde_json::json!({ "history": self.history });
        Checkpoint {
            meta,
            model: self.model.store().tensors(),
            optim: self.optim.state(),
            centers: Some(self.centers.clone()),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }

    fn validation_due(&self) -> bool {
        self.epoch % self.cfg.train.val_every == 0 || self.epoch == self.cfg.schedule.total_epochs
    }

    /// Trains until `schedule.total_epochs` (or the optional rank-1 target),
    /// validating at the configured cadence. Writes `last.safetensors` after
    /// every epoch and `best.safetensors` whenever validation rank-1 improves.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let last = self.cfg.out_dir.join(LAST_CHECKPOINT);
        let best = self.cfg.out_dir.join(BEST_CHECKPOINT);
        let mut best_written = best.exists() && self.epoch > 0;
        while self.epoch < self.cfg.schedule.total_epochs {
            self.train_epoch()?;
            let mut reached = false;
            if self.validation_due() {
                let report = self.validate()?;
                let rank1 = report.rank1();
                log::info!("epoch {}: rank-1 {:.2}%, mAP {:.2}%", self.epoch, rank1 * 100.0, report.map_score * 100.0);
                let improved = self.history.best_rank1().is_none_or(|b| rank1 > b);
                self.history.validations.push(ValidationRecord {
                    epoch: self.epoch,
                    rank1,
                    map: report.map_score,
                    cmc: report.cmc.clone(),
                });
                self.write_log(&LogRecord::Validation {
                    epoch: self.epoch,
                    rank1,
                    map: report.map_score,
                    cmc: report.cmc,
                })?;
                if improved {
                    self.save_checkpoint(&best)?;
                    best_written = true;
                }
                reached = self.cfg.train.target_rank1.is_some_and(|t| rank1 >= t);
            }
            self.save_checkpoint(&last)?;
            if reached {
                log::info!("rank-1 target reached at epoch {}", self.epoch);
                break;
            }
        }
        Ok(TrainOutcome {
            history: self.history.clone(),
            epochs_run: self.epoch,
            last_checkpoint: last,
            best_checkpoint: best_written.then_some(best),
        })
    }
}

/// Scans the dataset, echoes the config into the run directory and trains.
pub fn train(cfg: RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.echo()?;
    Trainer::new(cfg)?.run()
}
