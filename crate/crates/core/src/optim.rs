//! Warmup step schedule and an Adam optimizer whose state can be saved.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::ReidModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// fraction of `base_lr` reached at the end of warmup
    pub warmup_factor: f64,
    /// epochs after which the rate is multiplied by `decay_factor`
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.00035,
            warmup_epochs: 10,
            warmup_factor: 0.1,
            decay_epochs: vec![40, 70],
            decay_factor: 0.1,
            total_epochs: 120,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.warmup_factor > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::config("schedule rates must be positive"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be at least 1"));
        }
        let mut prev = self.warmup_epochs;
        for &d in &self.decay_epochs {
            if d <= prev {
                return Err(Error::config(
                    "decay epochs must be strictly increasing and after warmup",
                ));
            }
            prev = d;
        }
        Ok(())
    }
}

/// Learning rate for 1-indexed epoch `epoch`.
///
/// Warmup climbs linearly to `base_lr * warmup_factor` at `warmup_epochs`;
/// afterwards the rate is `base_lr` times `decay_factor` per decay epoch passed.
pub fn lr_at_epoch(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.total_epochs {
        return Err(Error::validation(format!(
            "epoch {epoch} outside 1..={}",
            cfg.total_epochs
        )));
    }
    if epoch <= cfg.warmup_epochs {
        return Ok(cfg.base_lr * cfg.warmup_factor * epoch as f64 / cfg.warmup_epochs as f64);
    }
    let passed = cfg.decay_epochs.iter().filter(|&&d| epoch > d).count();
    Ok(cfg.base_lr * cfg.decay_factor.powi(passed as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over a fixed, named parameter list. Moments live beside the
/// parameters so they can be checkpointed and restored.
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig, lr: f64) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            lr,
            step: 0,
            params,
            m,
            v,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            // gradients can carry their op graph; keep the moments free of it
            let mut g = g.detach();
            if c.weight_decay != 0.0 {
                g = (g + (p.as_tensor().detach() * c.weight_decay)?)?;
            }
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            p.set(&(p.as_tensor().detach() - (update * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (slot, key) in [(&mut self.m[i], format!("m.{name}")), (&mut self.v[i], format!("v.{name}"))] {
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if t.dims() != p.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                *slot = t.to_dtype(p.dtype())?.to_device(p.device())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Adam over every trainable model parameter at the epoch-1 rate. Center
/// vectors are not model parameters and are never part of this set.
pub fn build_optimizer(model: &ReidModel, schedule: &ScheduleConfig, adam: &AdamConfig) -> Result<Adam> {
    Adam::new(model.store().trainable(), adam.clone(), lr_at_epoch(1, schedule)?)
}
