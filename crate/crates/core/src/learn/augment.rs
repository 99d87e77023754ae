//! Observation perturbations applied to demonstration frames during training.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Observation, RGBD_CHANNELS};
use crate::numerics::{Rng, Tensor};
use crate::policy::ActionVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub translate: bool,
    pub rotate: bool,
    pub crop: bool,
    pub touch_noise: bool,
    /// Largest image shift in pixels along each axis.
    pub max_shift_px: i32,
    pub max_rotation_deg: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop_ratio: f64,
    pub touch_noise_std: f64,
    /// Chance that each enabled perturbation is applied to a given frame.
    pub prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translate: true,
            rotate: true,
            crop: true,
            touch_noise: true,
            max_shift_px: 10,
            max_rotation_deg: 15.0,
            min_crop_ratio: 0.8,
            touch_noise_std: 0.01,
            prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { translate: false, rotate: false, crop: false, touch_noise: false, ..Self::default() }
    }

    pub fn any(&self) -> bool {
        self.translate || self.rotate || self.crop || self.touch_noise
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_shift_px < 0 {
            return Err(Error::Config("augment.max_shift_px must be non-negative".into()));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg < 180.0) {
            return Err(Error::Config("augment.max_rotation_deg must lie in [0, 180)".into()));
        }
        if !(self.min_crop_ratio > 0.0 && self.min_crop_ratio <= 1.0) {
            return Err(Error::Config("augment.min_crop_ratio must lie in (0, 1]".into()));
        }
        if !(self.touch_noise_std >= 0.0 && self.touch_noise_std.is_finite()) {
            return Err(Error::Config("augment.touch_noise_std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config("augment.prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Parameters drawn for one frame; `None` where the perturbation was skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentParams {
    pub shift: Option<(i32, i32)>,
    pub rotation_deg: Option<f64>,
    pub crop_ratio: Option<f64>,
    pub touch_noise: bool,
}

/// Perturbs the observation; the action label passes through unchanged.
pub fn augment(obs: &Observation, action: &ActionVec, cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Observation, ActionVec, AugmentParams)> {
    let mut out = obs.clone();
    let mut params = AugmentParams::default();
    if !cfg.any() {
        return Ok((out, *action, params));
    }
    let fire = |on: bool, rng: &mut Rng| on && rng.random::<f64>() < cfg.prob;

    if let Some(img) = out.rgbd.as_mut() {
        if img.shape().len() != 3 || img.shape()[2] != RGBD_CHANNELS {
            return Err(Error::shape(format!("rgbd input has shape {:?}", img.shape())));
        }
        if fire(cfg.translate, rng) {
            let s = cfg.max_shift_px;
            let (dx, dy) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
            *img = translate(img, dx, dy);
            params.shift = Some((dx, dy));
        }
        if fire(cfg.rotate, rng) {
            let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
            *img = rotate(img, deg.to_radians());
            params.rotation_deg = Some(deg);
        }
        if fire(cfg.crop, rng) {
            let ratio = rng.random_range(cfg.min_crop_ratio..=1.0);
            *img = crop_resize(img, ratio, rng);
            params.crop_ratio = Some(ratio);
        }
    }
    if fire(cfg.touch_noise, rng) {
        if let Some(t) = out.touch.as_mut() {
            let normal = Normal::new(0.0, cfg.touch_noise_std).map_err(|e| Error::Config(e.to_string()))?;
            for v in t.data_mut() {
                *v += normal.sample(rng);
            }
            params.touch_noise = true;
        }
    }
    Ok((out, *action, params))
}

fn dims(img: &Tensor) -> (usize, usize) {
    (img.shape()[0], img.shape()[1])
}

/// Nearest-neighbour resample: output pixel `(r, c)` takes source pixel
/// `src(r, c)`, or zero when that falls outside the image.
fn resample(img: &Tensor, src: impl Fn(usize, usize) -> Option<(i64, i64)>) -> Tensor {
    let (h, w) = dims(img);
    let data = img.data();
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        for c in 0..w {
            if let Some((sr, sc)) = src(r, c) {
                if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                    let s = (sr as usize * w + sc as usize) * RGBD_CHANNELS;
                    let d = (r * w + c) * RGBD_CHANNELS;
                    out[d..d + RGBD_CHANNELS].copy_from_slice(&data[s..s + RGBD_CHANNELS]);
                }
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape as input")
}

/// Shifts content `dx` pixels right and `dy` pixels down, zero filling.
pub fn translate(img: &Tensor, dx: i32, dy: i32) -> Tensor {
    resample(img, |r, c| Some((r as i64 - dy as i64, c as i64 - dx as i64)))
}

/// Rotates content about the image centre by `theta` radians.
pub fn rotate(img: &Tensor, theta: f64) -> Tensor {
    let (h, w) = dims(img);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    resample(img, |r, col| {
        let (y, x) = (r as f64 - cy, col as f64 - cx);
        let sx = c * x + s * y + cx;
        let sy = -s * x + c * y + cy;
        Some((sy.round() as i64, sx.round() as i64))
    })
}

/// Takes a random window with sides `ratio` of the image and scales it back up.
pub fn crop_resize(img: &Tensor, ratio: f64, rng: &mut Rng) -> Tensor {
    let (h, w) = dims(img);
    let ch = ((h as f64 * ratio).round() as usize).clamp(1, h);
    let cw = ((w as f64 * ratio).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    resample(img, |r, c| Some(((top + r * ch / h) as i64, (left + c * cw / w) as i64)))
}
