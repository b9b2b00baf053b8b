//! Frame encoder, temporal attention, BN neck and bias-free classifier.

mod attention;
mod encoder;
mod layers;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

pub use attention::{aggregate, TemporalAttention};
pub use encoder::{Encoder, ResNet50, TinyEncoder};
pub use layers::{log_softmax_last, softmax_last, BatchNorm, LinearNoBias};
pub use store::{Entry, EntryKind, Init, LoadReport, ParamStore};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Residual50Ibn,
    Residual50,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSpace {
    PreBn,
    PostBn,
}

impl fmt::Display for FeatureSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSpace::PreBn => "pre-bn",
            FeatureSpace::PostBn => "post-bn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub name: EncoderKind,
    pub embed_dim: usize,
    pub last_stride: usize,
    /// optional safetensors file with backbone weights
    pub pretrained: Option<PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            name: EncoderKind::Residual50Ibn,
            embed_dim: ResNet50::EMBED_DIM,
            last_stride: 1,
            pretrained: None,
        }
    }
}

impl EncoderSpec {
    pub fn tiny(embed_dim: usize) -> Self {
        Self {
            name: EncoderKind::Tiny,
            embed_dim,
            last_stride: 1,
            pretrained: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub attn_reduce_dim: usize,
    pub temporal_kernel: usize,
    /// hand post-BN features to the metric losses
    pub bnneck_before_dml: bool,
    /// feature space used for retrieval
    pub eval_feature: FeatureSpace,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            num_classes: 625,
            attn_reduce_dim: 256,
            temporal_kernel: 3,
            bnneck_before_dml: true,
            eval_feature: FeatureSpace::PostBn,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub freeze_encoder: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if e.name != EncoderKind::Tiny && e.embed_dim != ResNet50::EMBED_DIM {
            return Err(Error::config(format!(
                "50-layer encoders produce {} channels, embed_dim is {}",
                ResNet50::EMBED_DIM,
                e.embed_dim
            )));
        }
        if !matches!(e.last_stride, 1 | 2) {
            return Err(Error::config("last_stride must be 1 or 2"));
        }
        let h = &self.head;
        if h.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if h.attn_reduce_dim == 0 {
            return Err(Error::config("attn_reduce_dim must be positive"));
        }
        if h.temporal_kernel.is_multiple_of(2) {
            return Err(Error::config("temporal_kernel must be odd"));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// (B, T, D)
    pub frame_feats: Tensor,
    /// (B, D)
    pub pre_bn: Tensor,
    /// (B, D)
    pub post_bn: Tensor,
    /// (B, num_classes)
    pub logits: Tensor,
    /// (B, T)
    pub scores: Tensor,
    bnneck_before_dml: bool,
    eval_feature: FeatureSpace,
}

impl ForwardOutput {
    /// Feature handed to the metric-learning losses.
    pub fn dml_features(&self) -> &Tensor {
        if self.bnneck_before_dml {
            &self.post_bn
        } else {
            &self.pre_bn
        }
    }

    /// Feature used for retrieval.
    pub fn eval_features(&self) -> &Tensor {
        match self.eval_feature {
            FeatureSpace::PostBn => &self.post_bn,
            FeatureSpace::PreBn => &self.pre_bn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total_params: usize,
    pub trainable_params: usize,
    /// (submodule, total, trainable)
    pub per_submodule: Vec<(String, usize, usize)>,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>14} {:>14}", "submodule", "params", "trainable")?;
        for (name, total, trainable) in &self.per_submodule {
            writeln!(f, "{name:<12} {total:>14} {trainable:>14}")?;
        }
        writeln!(f, "{:<12} {:>14} {:>14}", "total", self.total_params, self.trainable_params)?;
        write!(
            f,
            "parameter size: {:.2} MB (f32)",
            self.total_params as f64 * 4.0 / (1024.0 * 1024.0)
        )
    }
}

pub struct ReidModel {
    spec: ModelSpec,
    store: ParamStore,
    encoder: Encoder,
    attention: TemporalAttention,
    neck: BatchNorm,
    classifier: LinearNoBias,
}

impl ReidModel {
    pub fn new(spec: &ModelSpec, init_seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(device, init_seed);
        let e = &spec.encoder;
        let encoder = match e.name {
            EncoderKind::Tiny => Encoder::Tiny(TinyEncoder::new(&mut store, e.embed_dim, e.last_stride)?),
            EncoderKind::Residual50 => Encoder::ResNet(ResNet50::new(&mut store, e.last_stride, false)?),
            EncoderKind::Residual50Ibn => Encoder::ResNet(ResNet50::new(&mut store, e.last_stride, true)?),
        };
        let h = &spec.head;
        let attention =
            TemporalAttention::new(&mut store, e.embed_dim, h.attn_reduce_dim, h.temporal_kernel)?;
        let neck = BatchNorm::new(&mut store, "neck", e.embed_dim)?;
        // BN neck shift stays at zero
        store.set_trainable("neck.bias", false);
        let classifier = LinearNoBias::new(&mut store, "classifier", e.embed_dim, h.num_classes)?;
        let mut model = Self {
            spec: spec.clone(),
            store,
            encoder,
            attention,
            neck,
            classifier,
        };
        if let Some(path) = &e.pretrained {
            let report = model.load_backbone(path)?;
            log::info!(
                "loaded {} backbone tensors from {} ({} skipped)",
                report.loaded.len(),
                path.display(),
                report.skipped.len()
            );
        }
        if spec.freeze_encoder {
            model.store.set_trainable("encoder.", false);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.encoder.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.head.num_classes
    }

    /// Loads encoder weights from a safetensors file. Keys may carry the
    /// `encoder.` prefix or be bare torchvision names; everything else is ignored.
    pub fn load_backbone(&mut self, path: &std::path::Path) -> Result<LoadReport> {
        let raw = candle_core::safetensors::load(path, self.device())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut tensors = BTreeMap::new();
        for (k, v) in raw {
            let key = if k.starts_with("encoder.") { k } else { format!("encoder.{k}") };
            tensors.insert(key, v);
        }
        let encoder_only: BTreeMap<String, Tensor> = self
            .store
            .entries()
            .filter(|(k, _)| k.starts_with("encoder."))
            .filter_map(|(k, _)| tensors.get(k).map(|t| (k.to_string(), t.clone())))
            .collect();
        let report = self.store.load(&encoder_only, false)?;
        Ok(LoadReport {
            skipped: report
                .skipped
                .into_iter()
                .filter(|(k, _)| k.starts_with("encoder."))
                .collect(),
            ..report
        })
    }

    /// Final encoder feature maps for (N, 3, H, W) frames.
    pub fn feature_maps(&self, frames: &Tensor, train: bool) -> Result<Tensor> {
        self.encoder.feature_map(frames, train)
    }

    /// Per-frame global-average-pooled embeddings, (B, T, D).
    pub fn encode_frames(&self, batch: &Tensor, train: bool) -> Result<Tensor> {
        let dims = batch.dims();
        if dims.len() != 5 || dims[2] != 3 {
            return Err(Error::validation(format!(
                "expected a (B, T, 3, H, W) frame batch, got {dims:?}"
            )));
        }
        let (b, t, c, h, w) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let maps = self.feature_maps(&batch.reshape((b * t, c, h, w))?, train)?;
        let pooled = maps.mean((2, 3))?;
        Ok(pooled.reshape((b, t, self.embed_dim()))?)
    }

    pub fn temporal_attention(&self, frame_feats: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = frame_feats.dim(2)?;
        if d != self.embed_dim() {
            return Err(Error::validation(format!(
                "frame features have {d} channels, model expects {}",
                self.embed_dim()
            )));
        }
        self.attention.forward(frame_feats)
    }

    pub fn attention(&self) -> &TemporalAttention {
        &self.attention
    }

    /// BN neck then the bias-free classifier: `(post_bn, logits)`.
    pub fn bnneck_and_classify(&self, pre_bn: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let (_, d) = pre_bn.dims2()?;
        if d != self.classifier.in_features() {
            return Err(Error::validation(format!(
                "clip features have {d} channels, classifier expects {}",
                self.classifier.in_features()
            )));
        }
        let post_bn = self.neck.forward(pre_bn, train)?;
        let logits = self.classifier.forward(&post_bn)?;
        Ok((post_bn, logits))
    }

    /// Full pass over a (B, T, 3, H, W) clip batch.
    pub fn forward(&self, batch: &Tensor, train: bool) -> Result<ForwardOutput> {
        let frame_feats = self.encode_frames(batch, train)?;
        let (pre_bn, scores) = self.temporal_attention(&frame_feats)?;
        let (post_bn, logits) = self.bnneck_and_classify(&pre_bn, train)?;
        Ok(ForwardOutput {
            frame_feats,
            pre_bn,
            post_bn,
            logits,
            scores,
            bnneck_before_dml: self.spec.head.bnneck_before_dml,
            eval_feature: self.spec.head.eval_feature,
        })
    }

    /// Fresh classifier weights, e.g. after transfer to a new label set.
    pub fn reset_classifier(&mut self) -> Result<()> {
        self.store
            .reinit("classifier.weight", Init::Kaiming { fan: self.embed_dim() })
    }

    pub fn param_report(&self) -> ParamReport {
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (name, entry) in self.store.entries() {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let n = entry.var.elem_count();
            let group = name.split('.').next().unwrap_or(name).to_string();
            let slot = groups.entry(group).or_default();
            slot.0 += n;
            if entry.trainable {
                slot.1 += n;
            }
        }
        let total_params = groups.values().map(|g| g.0).sum();
        let trainable_params = groups.values().map(|g| g.1).sum();
        ParamReport {
            total_params,
            trainable_params,
            per_submodule: groups.into_iter().map(|(k, (t, tr))| (k, t, tr)).collect(),
        }
    }
}
