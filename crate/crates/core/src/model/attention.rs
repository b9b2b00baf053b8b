//! Temporal attention over frame embeddings.
//!
//! Per frame, a 1x1 spatial convolution reduces the pooled D-dim embedding
//! to `reduce_dim` channels (ReLU); a temporal 1-D convolution over the frame
//! axis then yields one logit per frame, and a softmax over frames gives the
//! attention scores. The clip feature is `(1/T) * sum_t a_t * f_t`.

use candle_core::{Tensor, Var};

use super::layers::{softmax_last, Conv2d, ConvOpts};
use super::store::{Init, ParamStore};
use crate::{Error, Result};

pub struct TemporalAttention {
    spatial: Conv2d,
    temporal_weight: Var,
    temporal_bias: Var,
    kernel: usize,
}

impl TemporalAttention {
    pub fn new(store: &mut ParamStore, dim: usize, reduce_dim: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config("temporal kernel size must be odd"));
        }
        let spatial = Conv2d::new(
            store,
            "attention.spatial",
            dim,
            reduce_dim,
            (1, 1),
            ConvOpts {
                stride: 1,
                padding: 0,
                bias: true,
            },
        )?;
        let temporal_weight = store.param(
            "attention.temporal.weight",
            &[1, reduce_dim, kernel],
            Init::Kaiming {
                fan: reduce_dim * kernel,
            },
        )?;
        let temporal_bias = store.param("attention.temporal.bias", &[1], Init::Zeros)?;
        Ok(Self {
            spatial,
            temporal_weight,
            temporal_bias,
            kernel,
        })
    }

    /// Attention logits, (B, T).
    pub fn logits(&self, frame_feats: &Tensor) -> Result<Tensor> {
        let (b, t, d) = frame_feats.dims3()?;
        let x = frame_feats.reshape((b * t, d, 1, 1))?;
        let reduced = self.spatial.forward(&x)?.relu()?;
        let r = reduced.dim(1)?;
        let seq = reduced.reshape((b, t, r))?.transpose(1, 2)?.contiguous()?;
        let s = seq.conv1d(self.temporal_weight.as_tensor(), self.kernel / 2, 1, 1, 1)?;
        let s = s.broadcast_add(&self.temporal_bias.as_tensor().reshape((1, 1, 1))?)?;
        Ok(s.reshape((b, t))?)
    }

    /// Returns `(clip_features (B, D), scores (B, T))`.
    pub fn forward(&self, frame_feats: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = frame_feats.dim(1)?;
        if t == 0 {
            return Err(Error::validation("temporal attention needs at least one frame"));
        }
        let total = frame_feats.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite frame features entering temporal attention".into()));
        }
        let scores = softmax_last(&self.logits(frame_feats)?)?;
        let clip = aggregate(frame_feats, &scores)?;
        Ok((clip, scores))
    }
}

/// `(1/T) * sum_t a_t * f_t` for features (B, T, D) and scores (B, T).
pub fn aggregate(frame_feats: &Tensor, scores: &Tensor) -> Result<Tensor> {
    let t = frame_feats.dim(1)?;
    let weighted = frame_feats.broadcast_mul(&scores.unsqueeze(2)?)?;
    Ok((weighted.sum(1)? / t as f64)?)
}
