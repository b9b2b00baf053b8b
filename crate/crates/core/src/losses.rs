//! Loss components: label-smoothed identity loss, ranked list loss with
//! non-trivial mining, center loss with its SGD center update, the
//! erasing-attention term, and their weighted sum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::Layout;
use crate::model::log_softmax_last;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RllConfig {
    /// negatives are pushed beyond this distance
    pub alpha: f64,
    /// positives are pulled within `alpha - margin`
    pub margin: f64,
    /// weight of the negative term
    pub lambda: f64,
    /// sharpness of the negative weighting `exp(temperature * (alpha - d))`;
    /// zero weights all non-trivial negatives equally
    pub temperature: f64,
}

impl Default for RllConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            margin: 1.3,
            lambda: 1.0,
            temperature: 0.0,
        }
    }
}

impl RllConfig {
    /// Margins used per dataset: 1.3 for MARS and iLIDS-VID, 0.04 for PRID2011.
    pub fn preset(layout: Layout) -> Self {
        let margin = match layout {
            Layout::Prid2011 => 0.04,
            _ => 1.3,
        };
        Self {
            margin,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("rll.alpha must be positive"));
        }
        if !(self.margin > 0.0 && self.margin < self.alpha) {
            return Err(Error::config("rll.margin must satisfy 0 < m < alpha"));
        }
        if !(self.lambda >= 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::config("rll.lambda and rll.temperature must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// center-loss weight
    pub beta: f64,
    /// label-smoothing constant
    pub epsilon: f64,
    /// flip the sign of the erasing-attention term (rewards attention on
    /// erased frames instead of penalizing it)
    pub negate_erase_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.00005,
            epsilon: 0.1,
            negate_erase_loss: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon must lie in [0, 1)"));
        }
        Ok(())
    }

    fn erase_sign(&self) -> f64 {
        if self.negate_erase_loss {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<T> {
    pub id: T,
    pub rll: T,
    pub center: T,
    pub erase_attn: T,
}

/// Total plus the four named components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub id: f64,
    pub rll: f64,
    pub center: f64,
    pub erase_attn: f64,
}

/// Smoothed target distribution: `1 - (N-1)/N * eps` on the true class and
/// `eps / N` elsewhere.
pub fn smoothed_targets(num_classes: usize, label: usize, epsilon: f64) -> Vec<f64> {
    let n = num_classes as f64;
    let mut q = vec![epsilon / n; num_classes];
    q[label] = 1.0 - (n - 1.0) / n * epsilon;
    q
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::validation(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Cross entropy against smoothed targets, averaged over the batch.
pub fn id_loss(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    check_labels(labels, b, n)?;
    let targets: Vec<f64> = labels
        .iter()
        .flat_map(|&y| smoothed_targets(n, y, epsilon))
        .collect();
    let q = Tensor::from_vec(targets, (b, n), logits.device())?.to_dtype(logits.dtype())?;
    let logp = log_softmax_last(logits)?;
    Ok(((q * logp)?.sum_all()? * (-1.0 / b as f64))?)
}

/// Euclidean distance matrix (B, B), differentiable.
pub fn pairwise_distances(features: &Tensor) -> Result<Tensor> {
    let diff = features.unsqueeze(1)?.broadcast_sub(&features.unsqueeze(0)?)?;
    // the tiny offset keeps the gradient finite on the zero diagonal
    Ok((diff.sqr()?.sum(2)? + 1e-12)?.sqrt()?)
}

/// Non-trivial sets per anchor: positives farther than `alpha - margin`,
/// negatives nearer than `alpha`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RllMining {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

pub fn rll_mining(dist: &[Vec<f64>], labels: &[usize], cfg: &RllConfig) -> RllMining {
    let b = labels.len();
    let mut positives = vec![Vec::new(); b];
    let mut negatives = vec![Vec::new(); b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let d = dist[i][j];
            if labels[i] == labels[j] {
                if d > cfg.alpha - cfg.margin {
                    positives[i].push(j);
                }
            } else if d < cfg.alpha {
                negatives[i].push(j);
            }
        }
    }
    RllMining {
        positives,
        negatives,
    }
}

fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Ranked list loss averaged over anchors.
///
/// Per anchor: the mean hinge over non-trivial positives plus `lambda` times
/// the weighted hinge over non-trivial negatives, with weights
/// `exp(temperature * (alpha - d))` normalized over the set. Empty sets
/// contribute zero.
pub fn rll_loss(features: &Tensor, labels: &[usize], cfg: &RllConfig) -> Result<Tensor> {
    let (b, _) = features.dims2()?;
    if labels.len() != b {
        return Err(Error::validation(format!("{} labels for a batch of {b}", labels.len())));
    }
    let dist = pairwise_distances(features)?;
    let host = to_f64_rows(&dist)?;
    if host.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite features entering ranked list loss".into()));
    }
    let mining = rll_mining(&host, labels, cfg);
    let mut pos_coef = vec![0.0; b * b];
    let mut neg_mask = vec![0.0; b * b];
    let mut no_neg = vec![0.0; b];
    for i in 0..b {
        let p = &mining.positives[i];
        for &j in p {
            pos_coef[i * b + j] = 1.0 / p.len() as f64;
        }
        for &j in &mining.negatives[i] {
            neg_mask[i * b + j] = 1.0;
        }
        if mining.negatives[i].is_empty() {
            no_neg[i] = 1.0;
        }
    }
    let dev = features.device();
    let dt = features.dtype();
    let pos_coef = Tensor::from_vec(pos_coef, (b, b), dev)?.to_dtype(dt)?;
    let neg_mask = Tensor::from_vec(neg_mask, (b, b), dev)?.to_dtype(dt)?;
    let no_neg = Tensor::from_vec(no_neg, b, dev)?.to_dtype(dt)?;

    let pos_term = (pos_coef * (&dist - (cfg.alpha - cfg.margin))?)?.sum_all()?;
    let neg_hinge = dist.affine(-1.0, cfg.alpha)?;
    // alpha - d <= alpha, so the exponent cannot overflow
    let w = ((&neg_hinge * cfg.temperature)?.exp()? * neg_mask)?;
    let wsum = (w.sum(1)? + no_neg)?;
    let neg_term = ((w * neg_hinge)?.sum(1)? / wsum)?.sum_all()?;
    let total = (pos_term + (neg_term * cfg.lambda)?)?;
    Ok((total / b as f64)?)
}

/// Per-class feature centers, updated outside the main optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    num_classes: usize,
    dim: usize,
    centers: Vec<f64>,
    pub learning_rate: f64,
}

impl CenterBank {
    /// Centers start at zero.
    pub fn new(num_classes: usize, dim: usize, learning_rate: f64) -> Self {
        Self {
            num_classes,
            dim,
            centers: vec![0.0; num_classes * dim],
            learning_rate,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, learning_rate: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("center rows differ in length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite center".into()));
        }
        Ok(Self {
            num_classes: rows.len(),
            dim,
            centers: rows.concat(),
            learning_rate,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.centers[class * self.dim..(class + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.centers
    }

    fn check(&self, features: &Tensor, labels: &[usize]) -> Result<usize> {
        let (b, d) = features.dims2()?;
        if d != self.dim {
            return Err(Error::validation(format!(
                "features have {d} dims, centers have {}",
                self.dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::validation(format!("label {bad} has no center row")));
        }
        if labels.len() != b {
            return Err(Error::validation(format!("{} labels for a batch of {b}", labels.len())));
        }
        Ok(b)
    }

    /// Moves each class present in the batch toward its batch mean:
    /// `c <- c - lr * (c - mean)`. Absent classes are untouched.
    pub fn update(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        self.check(features, labels)?;
        let rows = to_f64_rows(features)?;
        let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
        for (row, &y) in rows.iter().zip(labels) {
            let slot = sums.entry(y).or_insert_with(|| (vec![0.0; self.dim], 0));
            for (acc, v) in slot.0.iter_mut().zip(row) {
                *acc += v;
            }
            slot.1 += 1;
        }
        let lr = self.learning_rate;
        for (y, (sum, count)) in sums {
            let c = &mut self.centers[y * self.dim..(y + 1) * self.dim];
            for (ck, sk) in c.iter_mut().zip(&sum) {
                let mean = sk / count as f64;
                *ck -= lr * (*ck - mean);
            }
        }
        Ok(())
    }
}

/// `0.5 * sum_i ||f_i - c_{y_i}||^2` with the centers held constant.
pub fn center_loss(features: &Tensor, labels: &[usize], bank: &CenterBank) -> Result<Tensor> {
    let b = bank.check(features, labels)?;
    let gathered: Vec<f64> = labels.iter().flat_map(|&y| bank.row(y).to_vec()).collect();
    let centers = Tensor::from_vec(gathered, (b, bank.dim), features.device())?
        .to_dtype(features.dtype())?;
    Ok(((features - centers)?.sqr()?.sum_all()? * 0.5)?)
}

pub fn update_centers(bank: &mut CenterBank, features: &Tensor, labels: &[usize]) -> Result<()> {
    bank.update(features, labels)
}

/// Batch mean of `(1/T) * sum_t label_t * score_t`.
pub fn erase_attention_loss(scores: &Tensor, erase_labels: &Tensor) -> Result<Tensor> {
    if scores.dims() != erase_labels.dims() || scores.rank() != 2 {
        return Err(Error::validation(format!(
            "scores {:?} and erase labels {:?} must share a (B, T) shape",
            scores.dims(),
            erase_labels.dims()
        )));
    }
    let (_, t) = scores.dims2()?;
    let labels = erase_labels.to_dtype(scores.dtype())?;
    let per_clip = ((scores * labels)?.sum(1)? / t as f64)?;
    Ok(per_clip.mean_all()?)
}

/// Weighted sum `id + rll + beta * center + erase_attn` (erase term negated
/// when configured).
pub fn total_loss(c: &LossComponents<f64>, weights: &LossWeights) -> Result<LossBundle> {
    for (name, v) in [
        ("id", c.id),
        ("rll", c.rll),
        ("center", c.center),
        ("erase_attn", c.erase_attn),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite ({v})")));
        }
    }
    Ok(LossBundle {
        total: c.id + c.rll + weights.beta * c.center + weights.erase_sign() * c.erase_attn,
        id: c.id,
        rll: c.rll,
        center: c.center,
        erase_attn: c.erase_attn,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Differentiable total plus its logged breakdown.
pub fn compose(c: &LossComponents<Tensor>, weights: &LossWeights) -> Result<(Tensor, LossBundle)> {
    let bundle = total_loss(
        &LossComponents {
            id: scalar(&c.id)?,
            rll: scalar(&c.rll)?,
            center: scalar(&c.center)?,
            erase_attn: scalar(&c.erase_attn)?,
        },
        weights,
    )?;
    let total = ((&c.id + &c.rll)? + (&c.center * weights.beta)?)?;
    let total = (total + (&c.erase_attn * weights.erase_sign())?)?;
    Ok((total, bundle))
}
