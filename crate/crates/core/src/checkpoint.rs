//! Versioned checkpoints: parameters, buffers, optimizer moments and
//! centers as safetensors, with run metadata as JSON in the header.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView, View};
use serde::{Deserialize, Serialize};

use crate::losses::CenterBank;
use crate::model::{Init, LoadReport, ModelSpec, ReidModel};
use crate::{Error, Result};

pub const FORMAT: &str = "reid-checkpoint";
pub const VERSION: u32 = 1;
const META_KEY: &str = "reid";
const CENTERS: &str = "centers";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    /// last completed epoch
    pub epoch: usize,
    pub seed: u64,
    pub optimizer_step: u64,
    /// training person id for each classifier row
    pub class_ids: Vec<i64>,
    pub center_lr: f64,
    /// free-form run state (metric history, best score, ...)
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(model: &ModelSpec) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.clone(),
            epoch: 0,
            seed: 0,
            optimizer_step: 0,
            class_ids: Vec::new(),
            center_lr: 0.0,
            extra: serde_json::Value::Null,
        }
    }
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// store entries by name
    pub model: BTreeMap<String, Tensor>,
    /// optimizer moments, `m.<param>` / `v.<param>`
    pub optim: BTreeMap<String, Tensor>,
    pub centers: Option<CenterBank>,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn raw_f32(t: &Tensor) -> Result<Raw> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Raw {
        dtype: Dtype::F32,
        shape: t.dims().to_vec(),
        bytes: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    })
}

fn from_view(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut raws: BTreeMap<String, Raw> = BTreeMap::new();
    for (k, t) in &ckpt.model {
        raws.insert(format!("model.{k}"), raw_f32(t)?);
    }
    for (k, t) in &ckpt.optim {
        raws.insert(format!("optim.{k}"), raw_f32(t)?);
    }
    if let Some(bank) = &ckpt.centers {
        raws.insert(
            CENTERS.into(),
            Raw {
                dtype: Dtype::F64,
                shape: vec![bank.num_classes(), bank.dim()],
                bytes: bank.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect(),
            },
        );
    }
    let meta = serde_json::to_string(&ckpt.meta).expect("metadata serializes");
    let header = HashMap::from([(META_KEY.to_string(), meta)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(raws.iter(), Some(header), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no run metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
    let mut model = BTreeMap::new();
    let mut optim = BTreeMap::new();
    let mut centers = None;
    for (name, view) in st.tensors() {
        if let Some(k) = name.strip_prefix("model.") {
            model.insert(k.to_string(), from_view(&view, device)?);
        } else if let Some(k) = name.strip_prefix("optim.") {
            optim.insert(k.to_string(), from_view(&view, device)?);
        } else if name == CENTERS {
            let rows = from_view(&view, &Device::Cpu)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            centers = Some(CenterBank::from_rows(rows, meta.center_lr)?);
        }
    }
    Ok(Checkpoint {
        meta,
        model,
        optim,
        centers,
    })
}

/// Initializes `model` from a checkpoint's parameters.
///
/// Strict mode requires every tensor to match. Lenient mode loads what fits
/// and lists the rest; a classifier of the wrong class count is skipped and
/// freshly initialized.
pub fn init_from_checkpoint(model: &mut ReidModel, path: &Path, strict: bool) -> Result<LoadReport> {
    let ckpt = load_checkpoint(path, model.device())?;
    let report = model.store().load(&ckpt.model, strict)?;
    if report.skipped.iter().any(|(k, _)| k.starts_with("classifier.")) {
        let dim = model.embed_dim();
        model.store_mut().reinit("classifier.weight", Init::Kaiming { fan: dim })?;
        log::info!("classifier reinitialized for {} classes", model.num_classes());
    }
    for (name, reason) in &report.skipped {
        log::warn!("skipped {name}: {reason}");
    }
    Ok(report)
}
