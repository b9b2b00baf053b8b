use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use reid_core::checkpoint::load_checkpoint;
use reid_core::config::RunConfig;
use reid_core::datasets::{generate_synthetic, scan_dataset_with, Split, SynthConfig};
use reid_core::evalkit::{extract_features, run_protocol, write_feature_dump};
use reid_core::model::ReidModel;
use reid_core::trainer::{self, BEST_CHECKPOINT, LAST_CHECKPOINT};

mod report;

/// Video person re-identification: training, evaluation and tooling.
#[derive(Parser)]
#[command(name = "reid", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// TOML run config (defaults are used when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override a config value, e.g. `--set batch.identities=4`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// omit wall-clock fields so repeated runs produce identical files
    #[arg(long, global = true)]
    deterministic: bool,
    /// run directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a model
    Train,
    /// Evaluate a checkpoint with the configured protocol
    Eval {
        /// defaults to best (or last) checkpoint in the run directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump video features of one split
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "query")]
        split: Split,
        /// binary matrix path; a .jsonl sidecar is written next to it
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic dataset
    Synth {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 8)]
        ids: usize,
        #[arg(long, default_value_t = 2)]
        cams: usize,
        #[arg(long, default_value_t = 2)]
        tracklets: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: u32,
        #[arg(long, default_value_t = 32)]
        width: u32,
    },
    /// Render the metrics log of a run into tables and plots
    Report {
        /// run directory (defaults to --out or the config's out_dir)
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Print the parameter count of the configured model
    Params,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path, &common.overrides)?,
        None => RunConfig::from_toml_str("", &common.overrides)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    for name in [BEST_CHECKPOINT, LAST_CHECKPOINT] {
        let p = cfg.out_dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no checkpoint in {}; pass --checkpoint", cfg.out_dir.display())
}

fn model_from(path: &Path, cfg: &RunConfig) -> Result<ReidModel> {
    let device = reid_core::candle_core::Device::Cpu;
    let ckpt = load_checkpoint(path, &device)?;
    let mut spec = ckpt.meta.model.clone();
    spec.head.eval_feature = cfg.model.head.eval_feature;
    let model = ReidModel::new(&spec, ckpt.meta.seed, &device)?;
    model.store().load(&ckpt.model, true)?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.verb {
        Verb::Synth {
            root,
            ids,
            cams,
            tracklets,
            frames,
            height,
            width,
        } => {
            let cfg = SynthConfig {
                num_ids: ids,
                cams,
                tracklets_per: tracklets,
                frames_per: frames,
                image_size: (height, width),
                seed: common.seed.unwrap_or(0),
            };
            let summary = generate_synthetic(&root, &cfg)?;
            println!(
                "wrote {} tracklets ({} images) to {}",
                summary.tracklets,
                summary.images,
                root.display()
            );
        }
        Verb::Train => {
            let cfg = load_config(common)?;
            let outcome = trainer::train(cfg)?;
            println!("trained {} epochs", outcome.epochs_run);
            if let Some(best) = outcome.history.best_rank1() {
                println!("best rank-1 {:.2}%", best * 100.0);
            }
            println!("last checkpoint {}", outcome.last_checkpoint.display());
        }
        Verb::Eval { checkpoint } => {
            let cfg = load_config(common)?;
            let path = match checkpoint {
                Some(p) => p,
                None => default_checkpoint(&cfg)?,
            };
            let model = model_from(&path, &cfg)?;
            let index = scan_dataset_with(&cfg.dataset.root, cfg.dataset.layout, &cfg.dataset.scan_options())?;
            let report = run_protocol(&index, &model, &cfg.eval, cfg.clip_len, &cfg.transform)?;
            std::fs::create_dir_all(&cfg.out_dir)
                .with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;
            let out = cfg.out_dir.join(format!("eval_t{}.json", cfg.clip_len));
            std::fs::write(&out, report.to_json()).with_context(|| format!("cannot write {}", out.display()))?;
            println!("{}", report.to_table());
            println!("report {}", out.display());
        }
        Verb::Extract {
            checkpoint,
            split,
            output,
        } => {
            let cfg = load_config(common)?;
            let path = match checkpoint {
                Some(p) => p,
                None => default_checkpoint(&cfg)?,
            };
            let model = model_from(&path, &cfg)?;
            let index = scan_dataset_with(&cfg.dataset.root, cfg.dataset.layout, &cfg.dataset.scan_options())?;
            let records: Vec<_> = index.split(split).map(|(_, r)| r).collect();
            if records.is_empty() {
                bail!("dataset has no {split} tracklets");
            }
            let feats = extract_features(&records, &model, cfg.clip_len, &cfg.transform)?;
            let out = output.unwrap_or_else(|| cfg.out_dir.join(format!("features_{split}.bin")));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            }
            write_feature_dump(&out, &feats)?;
            println!("wrote {} features to {}", feats.len(), out.display());
        }
        Verb::Report { run } => {
            let dir = match run {
                Some(d) => d,
                None => load_config(common)?.out_dir,
            };
            let written = report::render(&dir)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Verb::Params => {
            let cfg = load_config(common)?;
            let model = ReidModel::new(&cfg.model, cfg.seed, &reid_core::candle_core::Device::Cpu)?;
            println!("{}", model.param_report());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
