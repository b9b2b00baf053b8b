//! Named parameter and buffer storage shared by all layers.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::seed::{self, Rng as ChaRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// learned weight
    Param,
    /// running statistic, never touched by the optimizer
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub var: Var,
    pub kind: EntryKind,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He normal with the given fan
    Kaiming { fan: usize },
    Uniform { bound: f64 },
}

/// Outcome of loading external tensors into the store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// (name, reason)
    pub skipped: Vec<(String, String)>,
}

pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    device: Device,
    rng: ChaRng,
}

impl ParamStore {
    pub fn new(device: &Device, init_seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            device: device.clone(),
            rng: seed::rng_for(init_seed, &[0x1417]),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn values(&mut self, n: usize, init: Init) -> Vec<f32> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Kaiming { fan } => {
                let std = (2.0 / fan.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect()
            }
            Init::Uniform { bound } => (0..n)
                .map(|_| self.rng.random_range(-bound..=bound) as f32)
                .collect(),
        }
    }

    fn make(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(Error::validation(format!("parameter {name} registered twice")));
        }
        let n = shape.iter().product();
        let data = self.values(n, init);
        Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let var = self.make(name, shape, init)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                kind: EntryKind::Param,
                trainable: true,
            },
        );
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let var = self.make(name, shape, init)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                kind: EntryKind::Buffer,
                trainable: false,
            },
        );
        Ok(var)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == EntryKind::Param && e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Marks every parameter under `prefix` as frozen (or unfrozen).
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (k, e) in self.entries.iter_mut() {
            if e.kind == EntryKind::Param && k.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Re-draws the values of one entry in place.
    pub fn reinit(&mut self, name: &str, init: Init) -> Result<()> {
        let var = self
            .entries
            .get(name)
            .ok_or_else(|| Error::validation(format!("no parameter named {name}")))?
            .var
            .clone();
        let shape = var.shape().dims().to_vec();
        let data = self.values(shape.iter().product(), init);
        var.set(&Tensor::from_vec(data, shape, &self.device)?)?;
        Ok(())
    }

    /// Snapshot of every entry (parameters and buffers) by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().detach()))
            .collect()
    }

    /// Copies matching tensors into the store. `strict` fails on any missing,
    /// extra or mis-shaped entry; otherwise such entries are skipped and listed.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        for (name, entry) in &self.entries {
            let Some(t) = tensors.get(name) else {
                if strict {
                    return Err(Error::Checkpoint(format!("missing tensor {name}")));
                }
                report.skipped.push((name.clone(), "missing in source".into()));
                continue;
            };
            if t.dims() != entry.var.dims() {
                let reason = format!("shape {:?} != expected {:?}", t.dims(), entry.var.dims());
                if strict {
                    return Err(Error::Checkpoint(format!("tensor {name}: {reason}")));
                }
                report.skipped.push((name.clone(), reason));
                continue;
            }
            entry
                .var
                .set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
            report.loaded.push(name.clone());
        }
        let extra: Vec<&String> = tensors.keys().filter(|k| !self.entries.contains_key(*k)).collect();
        if strict && !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensors in source: {}",
                extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(report)
    }
}
