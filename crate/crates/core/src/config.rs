//! Run configuration: one TOML schema shared by every command, with dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datasets::{BatchSpec, Layout, ScanOptions};
use crate::evalkit::ProtocolConfig;
use crate::losses::{LossWeights, RllConfig};
use crate::model::ModelSpec;
use crate::optim::{AdamConfig, ScheduleConfig};
use crate::transforms::TransformConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub layout: Layout,
    pub verify_images: bool,
    /// which seeded half split to train on (PRID2011 / iLIDS-VID)
    pub split_index: usize,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            layout: Layout::Synthetic,
            verify_images: true,
            split_index: 0,
            split_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            verify_images: self.verify_images,
            split_index: self.split_index,
            split_seed: self.split_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// validate every this many epochs (and after the last one)
    pub val_every: usize,
    /// SGD step of the center update
    pub center_lr: f64,
    /// checkpoint to initialize weights from (transfer learning)
    pub init_checkpoint: Option<PathBuf>,
    pub init_strict: bool,
    /// checkpoint to continue an interrupted run from
    pub resume: Option<PathBuf>,
    /// stop once validation rank-1 reaches this value
    pub target_rank1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            val_every: 10,
            center_lr: 0.5,
            init_checkpoint: None,
            init_strict: false,
            resume: None,
            target_rank1: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// keep run directories byte-identical across repeats (no wall-clock fields)
    pub deterministic: bool,
    /// frames per clip
    pub clip_len: usize,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub batch: BatchSpec,
    pub transform: TransformConfig,
    pub model: ModelSpec,
    pub loss: LossWeights,
    pub rll: RllConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub eval: ProtocolConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            clip_len: 4,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            batch: BatchSpec::default(),
            transform: TransformConfig::default(),
            model: ModelSpec::default(),
            loss: LossWeights::default(),
            rll: RllConfig::default(),
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            eval: ProtocolConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Keys that may be set although they are absent from a default config.
const OPTIONAL_KEYS: &[&str] = &[
    "model.encoder.pretrained",
    "train.init_checkpoint",
    "train.resume",
    "train.target_rank1",
];

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn lookup<'a>(table: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let v = table.get(*first)?;
    if rest.is_empty() {
        Some(v)
    } else {
        lookup(v.as_table()?, rest)
    }
}

fn insert(table: &mut Table, path: &[&str], value: Value) -> Result<()> {
    let (first, rest) = path.split_first().expect("non-empty key");
    if rest.is_empty() {
        table.insert(first.to_string(), value);
        return Ok(());
    }
    let slot = table
        .entry(first.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match slot {
        Value::Table(t) => insert(t, rest, value),
        _ => Err(Error::config(format!("{first} is not a table"))),
    }
}

/// Dotted keys of every leaf in `table`, with a prefix.
fn leaf_keys(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => leaf_keys(t, &key, out),
            _ => out.push(key),
        }
    }
}

fn known_key(full: &Table, key: &str) -> bool {
    let path: Vec<&str> = key.split('.').collect();
    OPTIONAL_KEYS.contains(&key) || lookup(full, &path).is_some_and(|v| !v.is_table())
}

fn full_table(cfg: &RunConfig) -> Table {
    Table::try_from(cfg).expect("run config serializes")
}

impl RunConfig {
    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    /// Parses a config, applies `key=value` overrides and validates. A
    /// missing `rll.margin` takes the dataset's preset.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e| Error::config(format!("cannot parse config: {e}")))?;
        let full = full_table(&Self::default());
        let mut keys = Vec::new();
        leaf_keys(&table, "", &mut keys);
        if let Some(bad) = keys.iter().find(|k| !known_key(&full, k)) {
            return Err(Error::config(format!("unknown config key {bad}")));
        }
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {ov:?} is not key=value")))?;
            let key = key.trim();
            if !known_key(&full, key) {
                return Err(Error::config(format!("override names unknown key {key}")));
            }
            let path: Vec<&str> = key.split('.').collect();
            insert(&mut table, &path, parse_value(raw.trim()))?;
        }
        let explicit_margin = lookup(&table, &["rll", "margin"]).is_some();
        let mut cfg: RunConfig = Table::try_into(table)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        if !explicit_margin {
            cfg.rll.margin = RllConfig::preset(cfg.dataset.layout).margin;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::config("clip_len must be at least 1"));
        }
        if self.train.val_every == 0 {
            return Err(Error::config("train.val_every must be at least 1"));
        }
        if !(self.train.center_lr >= 0.0) {
            return Err(Error::config("train.center_lr must be non-negative"));
        }
        self.batch.validate()?;
        self.transform.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.rll.validate()?;
        self.schedule.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective config to `<out_dir>/config.toml`.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml_str(
            "",
            &[
                "clip_len=8".into(),
                "batch.identities=4".into(),
                "dataset.root=/tmp/x".into(),
                "model.encoder.name=tiny".into(),
                "model.encoder.embed_dim=32".into(),
                "train.init_checkpoint=a.safetensors".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.clip_len, 8);
        assert_eq!(cfg.batch.identities, 4);
        assert_eq!(cfg.dataset.root, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.train.init_checkpoint, Some(PathBuf::from("a.safetensors")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("", &["nope=1".into()]).is_err());
        assert!(RunConfig::from_toml_str("[batch]\nidentites = 4\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["clip_len".into()]).is_err());
    }

    #[test]
    fn invariants_checked() {
        let err = RunConfig::from_toml_str("[batch]\nidentities = 1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_toml_str("clip_len = 0", &[]).is_err());
    }

    #[test]
    fn margin_preset_follows_layout() {
        let prid = RunConfig::from_toml_str("[dataset]\nlayout = \"prid2011\"\n", &[]).unwrap();
        assert_eq!(prid.rll.margin, 0.04);
        let explicit =
            RunConfig::from_toml_str("[dataset]\nlayout = \"prid2011\"\n[rll]\nmargin = 0.5\n", &[]).unwrap();
        assert_eq!(explicit.rll.margin, 0.5);
    }
}
