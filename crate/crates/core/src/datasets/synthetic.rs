//! Deterministic synthetic tracklets for desk-scale runs.
//!
//! Each identity is a stylized figure (head accent, striped torso, legs)
//! whose colors and stripe pattern are keyed by `(seed, id)`. Cameras apply a
//! fixed color cast and background texture keyed only by the camera index, so
//! two generated datasets share their camera models. Frames jitter the figure
//! position and add pixel noise.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::{self, rng_for};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub cams: usize,
    pub tracklets_per: usize,
    pub frames_per: usize,
    /// (height, width) in pixels
    pub image_size: (u32, u32),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 8,
            cams: 2,
            tracklets_per: 1,
            frames_per: 16,
            image_size: (64, 32),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub tracklets: usize,
    pub images: usize,
}

struct Identity {
    head: [f32; 3],
    torso: [f32; 3],
    legs: [f32; 3],
    stripe_period: u32,
    vertical_stripes: bool,
}

struct Camera {
    gain: [f32; 3],
    offset: [f32; 3],
    background: [f32; 3],
    texture_period: u32,
}

const CAMERA_KEY: u64 = 0xca3e_7a00;

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.random_range(30.0..225.0))
}

fn identity(seed: u64, id: usize) -> Identity {
    let mut rng = rng_for(seed, &[0x1d, id as u64]);
    Identity {
        head: color(&mut rng),
        torso: color(&mut rng),
        legs: color(&mut rng),
        stripe_period: rng.random_range(2..7),
        vertical_stripes: rng.random_bool(0.5),
    }
}

fn camera(cam: usize) -> Camera {
    let mut rng = rng_for(CAMERA_KEY, &[cam as u64]);
    Camera {
        gain: [0, 1, 2].map(|_| rng.random_range(0.6..1.3)),
        offset: [0, 1, 2].map(|_| rng.random_range(-25.0..25.0)),
        background: color(&mut rng),
        texture_period: rng.random_range(3..9),
    }
}

fn render<R: Rng>(who: &Identity, cam: &Camera, (h, w): (u32, u32), rng: &mut R) -> RgbImage {
    let dx = rng.random_range(-(w as i64) / 8..=(w as i64) / 8);
    let dy = rng.random_range(-(h as i64) / 16..=(h as i64) / 16);
    let phase = rng.random_range(0..cam.texture_period);
    let (x0, x1) = (w as i64 / 4 + dx, 3 * w as i64 / 4 + dx);
    let (y0, y1) = (h as i64 / 10 + dy, 9 * h as i64 / 10 + dy);
    let head_end = y0 + (y1 - y0) / 6;
    let torso_end = y0 + (y1 - y0) / 2;
    RgbImage::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as i64, y as i64);
        let base = if xi >= x0 && xi < x1 && yi >= y0 && yi < y1 {
            if yi < head_end {
                who.head
            } else if yi < torso_end {
                let coord = if who.vertical_stripes { xi - x0 } else { yi - head_end };
                let on = (coord as u32 / who.stripe_period).is_multiple_of(2);
                who.torso.map(|c| if on { c } else { c * 0.55 })
            } else {
                who.legs
            }
        } else {
            let band = ((x + y + phase) / cam.texture_period).is_multiple_of(2);
            cam.background.map(|c| if band { c } else { c * 0.7 })
        };
        let px: [u8; 3] = std::array::from_fn(|ch| {
            let noise = rng.random_range(-12.0..12.0);
            (base[ch] * cam.gain[ch] + cam.offset[ch] + noise).clamp(0.0, 255.0) as u8
        });
        Rgb(px)
    })
}

/// Writes `root/<id>/<cam>/<tracklet>/<frame>.png` with ids numbered from 1.
pub fn generate_synthetic(root: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    let counts = [
        ("num_ids", cfg.num_ids),
        ("cams", cfg.cams),
        ("tracklets_per", cfg.tracklets_per),
        ("frames_per", cfg.frames_per),
    ];
    if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
        return Err(Error::validation(format!("synthetic {name} must be at least 1")));
    }
    let (h, w) = cfg.image_size;
    if h < 8 || w < 8 {
        return Err(Error::validation("synthetic images must be at least 8x8"));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let cameras: Vec<Camera> = (0..cfg.cams).map(camera).collect();
    let mut summary = SynthSummary {
        tracklets: 0,
        images: 0,
    };
    for id in 1..=cfg.num_ids {
        let who = identity(cfg.seed, id);
        for (c, cam) in cameras.iter().enumerate() {
            for t in 0..cfg.tracklets_per {
                let dir = root
                    .join(format!("{id:04}"))
                    .join(format!("{c:02}"))
                    .join(format!("{t:04}"));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let mut rng = seed::rng_for(cfg.seed, &[0xf4, id as u64, c as u64, t as u64]);
                for f in 0..cfg.frames_per {
                    let img = render(&who, cam, (h, w), &mut rng);
                    let path = dir.join(format!("{f:05}.png"));
                    img.save(&path).map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&path, io),
                        other => Error::validation(format!("{}: {other}", path.display())),
                    })?;
                    summary.images += 1;
                }
                summary.tracklets += 1;
            }
        }
    }
    Ok(summary)
}
