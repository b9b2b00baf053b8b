//! Per-frame preprocessing: resize, zero-pad + random crop, horizontal flip,
//! channel normalization and random erasing with per-frame erase labels.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed::Rng as ChaRng;
use crate::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EraseFill {
    /// standard-normal noise in normalized space
    Random,
    /// the channel mean, i.e. zero after normalization
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaConfig {
    pub probability: f64,
    /// fraction of the image area, (s_l, s_h)
    pub area_range: (f64, f64),
    /// aspect ratios are drawn from (r1, 1/r1)
    pub aspect_min: f64,
    pub fill: EraseFill,
}

impl Default for ReaConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            area_range: (0.02, 0.4),
            aspect_min: 0.3,
            fill: EraseFill::Random,
        }
    }
}

impl ReaConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_range;
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("rea.probability must lie in [0, 1]"));
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config("rea.area_range must satisfy 0 < s_l <= s_h < 1"));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= 1.0) {
            return Err(Error::config("rea.aspect_min must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Frame pipeline settings. The default target is 244x112; 256x128 and
/// 224x112 are other common choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    /// (height, width)
    pub target_size: (u32, u32),
    pub pad: u32,
    pub flip_prob: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub rea: ReaConfig,
    pub train: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            target_size: (244, 112),
            pad: 10,
            flip_prob: 0.5,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            rea: ReaConfig::default(),
            train: true,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0, 1]"));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::config("normalization std components must be positive"));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::config("target_size must be non-zero"));
        }
        self.rea.validate()
    }

    pub fn eval_mode(&self) -> Self {
        Self {
            train: false,
            ..self.clone()
        }
    }
}

/// Axis-aligned erased region, in output pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl EraseRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// `T` preprocessed frames laid out as (T, 3, H, W) plus one erase label per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensor {
    pub data: Vec<f32>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub erase_labels: Vec<u8>,
    /// the erased rectangle of each frame, if any
    pub erased: Vec<Option<EraseRect>>,
}

impl ClipTensor {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    /// Stacks equally shaped clips into a (B, T, 3, H, W) tensor.
    pub fn stack(clips: &[ClipTensor], device: &candle_core::Device) -> Result<candle_core::Tensor> {
        let first = clips
            .first()
            .ok_or_else(|| Error::validation("cannot stack zero clips"))?;
        let shape = (first.frames, first.height, first.width);
        if clips.iter().any(|c| (c.frames, c.height, c.width) != shape) {
            return Err(Error::validation("clips in a batch differ in shape"));
        }
        let data: Vec<f32> = clips.iter().flat_map(|c| c.data.iter().copied()).collect();
        Ok(candle_core::Tensor::from_vec(
            data,
            (clips.len(), shape.0, 3, shape.1, shape.2),
            device,
        )?)
    }

    /// Erase labels as a (B, T) f32 tensor.
    pub fn stack_erase_labels(clips: &[ClipTensor], device: &candle_core::Device) -> Result<candle_core::Tensor> {
        let t = clips.first().map_or(0, |c| c.frames);
        let data: Vec<f32> = clips
            .iter()
            .flat_map(|c| c.erase_labels.iter().map(|&l| l as f32))
            .collect();
        Ok(candle_core::Tensor::from_vec(data, (clips.len(), t), device)?)
    }
}

/// Loads and preprocesses the frames of one clip.
pub fn load_clip<R: Rng + ?Sized>(
    paths: &[&Path],
    cfg: &TransformConfig,
    rng: &mut R,
) -> Result<ClipTensor> {
    let images = paths
        .iter()
        .map(|p| load_rgb(p))
        .collect::<Result<Vec<_>>>()?;
    preprocess_clip(&images, cfg, rng)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::validation(format!("cannot decode {}: {e}", path.display())))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::validation(format!("zero-sized image {}", path.display())));
    }
    Ok(img.to_rgb8())
}

fn to_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    out
}

/// Zero-pad by `pad` on every side, then cut an (h, w) window at (top, left)
/// of the padded image.
fn pad_crop(src: &[f32], h: usize, w: usize, pad: usize, top: usize, left: usize) -> Vec<f32> {
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let sy = (y + top) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + left) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[c * h * w + y * w + x] = src[c * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    out
}

pub fn hflip(frame: &mut [f32], h: usize, w: usize) {
    for row in frame.chunks_exact_mut(w).take(3 * h) {
        row.reverse();
    }
}

pub fn normalize(frame: &mut [f32], h: usize, w: usize, mean: &[f32; 3], std: &[f32; 3]) {
    for (c, plane) in frame.chunks_exact_mut(h * w).enumerate() {
        for v in plane {
            *v = (*v - mean[c]) / std[c];
        }
    }
}

pub fn denormalize(frame: &mut [f32], h: usize, w: usize, mean: &[f32; 3], std: &[f32; 3]) {
    for (c, plane) in frame.chunks_exact_mut(h * w).enumerate() {
        for v in plane {
            *v = *v * std[c] + mean[c];
        }
    }
}

/// Random erasing on a normalized (3, H, W) frame. Returns the erased
/// rectangle, or `None` when the coin says no or no rectangle fits within
/// 100 attempts.
pub fn random_erase<R: Rng + ?Sized>(
    frame: &mut [f32],
    h: usize,
    w: usize,
    cfg: &ReaConfig,
    rng: &mut R,
) -> Option<EraseRect> {
    if rng.random::<f64>() >= cfg.probability {
        return None;
    }
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(cfg.area_range.0..=cfg.area_range.1) * area;
        let aspect = rng.random_range(cfg.aspect_min..=1.0 / cfg.aspect_min);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for c in 0..3 {
            for y in top..top + eh {
                for x in left..left + ew {
                    frame[c * h * w + y * w + x] = match cfg.fill {
                        EraseFill::Random => StandardNormal.sample(rng),
                        EraseFill::Mean => 0.0,
                    };
                }
            }
        }
        return Some(EraseRect {
            top,
            left,
            height: eh,
            width: ew,
        });
    }
    None
}

/// Runs the frame pipeline over one clip.
///
/// Order: resize, zero-pad, random crop, flip (own coin per frame),
/// normalize, random erasing (own coin per frame). In eval mode only resize
/// and normalize run and every erase label is 0. Geometry and erasing draw
/// from separate streams split off `rng`, so toggling erasing leaves crops
/// and flips unchanged.
pub fn preprocess_clip<R: Rng + ?Sized>(
    images: &[RgbImage],
    cfg: &TransformConfig,
    rng: &mut R,
) -> Result<ClipTensor> {
    let (h, w) = (cfg.target_size.0 as usize, cfg.target_size.1 as usize);
    let mut geo = ChaRng::seed_from_u64(rng.random());
    let mut erase = ChaRng::seed_from_u64(rng.random());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    let mut erased = Vec::with_capacity(images.len());
    for img in images {
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::validation("zero-sized frame"));
        }
        let resized;
        let img = if (img.height(), img.width()) == cfg.target_size {
            img
        } else {
            resized = imageops::resize(img, w as u32, h as u32, FilterType::Triangle);
            &resized
        };
        let mut frame = to_chw(img);
        let mut rect = None;
        if cfg.train {
            let pad = cfg.pad as usize;
            let top = geo.random_range(0..=2 * pad);
            let left = geo.random_range(0..=2 * pad);
            if pad > 0 {
                frame = pad_crop(&frame, h, w, pad, top, left);
            }
            if geo.random::<f64>() < cfg.flip_prob {
                hflip(&mut frame, h, w);
            }
            normalize(&mut frame, h, w, &cfg.mean, &cfg.std);
            rect = random_erase(&mut frame, h, w, &cfg.rea, &mut erase);
        } else {
            normalize(&mut frame, h, w, &cfg.mean, &cfg.std);
        }
        data.extend_from_slice(&frame);
        erased.push(rect);
    }
    Ok(ClipTensor {
        data,
        frames: images.len(),
        height: h,
        width: w,
        erase_labels: erased.iter().map(|r| r.is_some() as u8).collect(),
        erased,
    })
}
