//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use reid_core::candle_core::{DType, Device, Tensor, Var};
use reid_core::config::RunConfig;
use reid_core::datasets::{generate_synthetic, scan_dataset, Layout, SynthConfig, TrackletIndex};
use reid_core::evalkit::{Meta, JUNK_ID};
use reid_core::losses::RllConfig;
use reid_core::model::{EncoderSpec, ModelSpec};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn tensor2(data: &[Vec<f64>]) -> Tensor {
    let (r, c) = (data.len(), data[0].len());
    Tensor::from_vec(data.concat(), (r, c), &Device::Cpu).unwrap()
}

/// Relative error between the analytic gradient of `f` at `x` and central
/// differences with step `h`, measured in the L2 norm.
pub fn gradient_error(x: &[Vec<f64>], h: f64, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&tensor2(x)).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let analytic = rows(grads.get(var.as_tensor()).expect("gradient reaches input"));
    let mut num = 0.0;
    let mut den_a = 0.0;
    let mut den_n = 0.0;
    for i in 0..x.len() {
        for j in 0..x[0].len() {
            let mut plus = x.to_vec();
            plus[i][j] += h;
            let mut minus = x.to_vec();
            minus[i][j] -= h;
            let fd = (scalar(&f(&tensor2(&plus))) - scalar(&f(&tensor2(&minus)))) / (2.0 * h);
            num += (analytic[i][j] - fd).powi(2);
            den_a += analytic[i][j].powi(2);
            den_n += fd.powi(2);
        }
    }
    let den = den_a.sqrt().max(den_n.sqrt());
    if den < 1e-12 {
        num.sqrt()
    } else {
        num.sqrt() / den
    }
}

pub struct RllOracle {
    pub loss: f64,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Ranked list loss by explicit pair loops.
pub fn rll_oracle(f: &[Vec<f64>], labels: &[usize], cfg: &RllConfig) -> RllOracle {
    let b = f.len();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..f[i].len() {
            s += (f[i][k] - f[j][k]) * (f[i][k] - f[j][k]);
        }
        s.sqrt()
    };
    let mut total = 0.0;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..b {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..b {
            if j == i {
                continue;
            }
            let d = dist(i, j);
            if labels[j] == labels[i] && d > cfg.alpha - cfg.margin {
                pos.push(j);
            }
            if labels[j] != labels[i] && d < cfg.alpha {
                neg.push(j);
            }
        }
        let mut lp = 0.0;
        for &j in &pos {
            lp += dist(i, j) - (cfg.alpha - cfg.margin);
        }
        if !pos.is_empty() {
            lp /= pos.len() as f64;
        }
        let mut wsum = 0.0;
        let mut ln = 0.0;
        for &j in &neg {
            let w = (cfg.temperature * (cfg.alpha - dist(i, j))).exp();
            wsum += w;
            ln += w * (cfg.alpha - dist(i, j));
        }
        if wsum > 0.0 {
            ln /= wsum;
        }
        total += lp + cfg.lambda * ln;
        positives.push(pos);
        negatives.push(neg);
    }
    RllOracle {
        loss: total / b as f64,
        positives,
        negatives,
    }
}

fn valid(q: Meta, g: Meta) -> bool {
    g.person_id != JUNK_ID && !(g.person_id == q.person_id && g.camera_id == q.camera_id)
}

/// Position of gallery entry `j` among the valid entries of query `qi`,
/// counting strictly closer entries and equal ones earlier in gallery order.
fn position(dist: &[Vec<f64>], qi: usize, q: Meta, g: &[Meta], j: usize) -> usize {
    (0..g.len())
        .filter(|&k| valid(q, g[k]))
        .filter(|&k| dist[qi][k] < dist[qi][j] || (dist[qi][k] == dist[qi][j] && k < j))
        .count()
}

/// (per-rank accuracy for ranks 1..=max_rank, number of evaluated queries)
pub fn cmc_oracle(dist: &[Vec<f64>], q: &[Meta], g: &[Meta], max_rank: usize) -> (Vec<f64>, usize) {
    let mut hits = vec![0usize; max_rank];
    let mut evaluated = 0;
    for (qi, &qm) in q.iter().enumerate() {
        let first = (0..g.len())
            .filter(|&j| valid(qm, g[j]) && g[j].person_id == qm.person_id)
            .map(|j| position(dist, qi, qm, g, j))
            .min();
        let Some(first) = first else { continue };
        evaluated += 1;
        for (k, h) in hits.iter_mut().enumerate() {
            if first <= k {
                *h += 1;
            }
        }
    }
    (hits.iter().map(|&h| h as f64 / evaluated as f64).collect(), evaluated)
}

pub fn map_oracle(dist: &[Vec<f64>], q: &[Meta], g: &[Meta]) -> f64 {
    let mut sum = 0.0;
    let mut evaluated = 0;
    for (qi, &qm) in q.iter().enumerate() {
        let ranks: Vec<usize> = (0..g.len())
            .filter(|&j| valid(qm, g[j]) && g[j].person_id == qm.person_id)
            .map(|j| position(dist, qi, qm, g, j))
            .collect();
        if ranks.is_empty() {
            continue;
        }
        evaluated += 1;
        let mut ap = 0.0;
        for &r in &ranks {
            let better = ranks.iter().filter(|&&o| o <= r).count();
            ap += better as f64 / (r + 1) as f64;
        }
        sum += ap / ranks.len() as f64;
    }
    sum / evaluated as f64
}

pub fn synth(root: &Path, num_ids: usize, seed: u64) -> TrackletIndex {
    let cfg = SynthConfig {
        num_ids,
        cams: 2,
        tracklets_per: 2,
        frames_per: 8,
        image_size: (64, 32),
        seed,
    };
    generate_synthetic(root, &cfg).unwrap();
    scan_dataset(root, Layout::Synthetic).unwrap()
}

/// Small CPU training setup on a synthetic root: tiny encoder, T = 4,
/// 64x32 frames, 8x4 batches and a compressed schedule. The ranked list
/// boundary is widened to the scale of 128-d normalized features.
pub fn smoke_config(root: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.deterministic = true;
    cfg.out_dir = out.to_path_buf();
    cfg.dataset.root = root.to_path_buf();
    cfg.dataset.layout = Layout::Synthetic;
    cfg.batch.identities = 8;
    cfg.batch.instances = 4;
    cfg.transform.target_size = (64, 32);
    cfg.transform.pad = 4;
    cfg.model = ModelSpec {
        encoder: EncoderSpec::tiny(128),
        ..ModelSpec::default()
    };
    cfg.model.head.attn_reduce_dim = 32;
    cfg.rll.alpha = 12.0;
    cfg.schedule.base_lr = 3e-3;
    cfg.schedule.warmup_epochs = 2;
    cfg.schedule.warmup_factor = 1.0;
    cfg.schedule.decay_epochs = vec![20];
    cfg.schedule.total_epochs = 30;
    cfg.train.val_every = 5;
    cfg
}
