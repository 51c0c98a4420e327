//! Discriminator-input augmentations: random crop (resized back), brightness
//! shift and horizontal flip, each applied with a configured probability.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Element, Tensor};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub crop_probability: f64,
    /// Retained side-length fraction of a crop.
    pub crop_fraction: f64,
    pub brightness_probability: f64,
    /// Maximum absolute brightness shift.
    pub brightness_delta: f64,
    /// Zero disables flips entirely (laterality-sensitive data).
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_probability: 0.5,
            crop_fraction: 0.875,
            brightness_probability: 0.5,
            brightness_delta: 0.2,
            flip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("crop_probability", self.crop_probability),
            ("brightness_probability", self.brightness_probability),
            ("flip_probability", self.flip_probability),
            ("brightness_delta", self.brightness_delta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::config(format!(
                "crop_fraction must be in (0,1], got {}",
                self.crop_fraction
            )));
        }
        Ok(())
    }
}

/// One sampled transform; applied identically to the real and generated image
/// of a discriminator pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugParams {
    /// Crop offset fractions in [0,1] of the slack, when cropping fires.
    pub crop: Option<(f64, f64)>,
    /// Additive shift, when the brightness jitter fires.
    pub brightness: Option<f64>,
    pub flip: bool,
}

impl AugParams {
    pub fn identity() -> Self {
        AugParams { crop: None, brightness: None, flip: false }
    }
}

pub fn sample_aug_params(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugParams {
    let crop = if rng.gen::<f64>() < cfg.crop_probability {
        Some((rng.gen::<f64>(), rng.gen::<f64>()))
    } else {
        None
    };
    let brightness = if rng.gen::<f64>() < cfg.brightness_probability {
        Some(rng.gen_range(-cfg.brightness_delta..=cfg.brightness_delta))
    } else {
        None
    };
    let flip = rng.gen::<f64>() < cfg.flip_probability;
    AugParams { crop, brightness, flip }
}

/// Applies `params` to one (C,H,W) image; output is clipped to [0,1].
pub fn augment_image<E: Element>(img: &Tensor<E>, cfg: &AugmentConfig, params: &AugParams) -> Tensor<E> {
    let shape = img.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = img.clone();

    if let Some((fx, fy)) = params.crop {
        let crop_h = ((h as f64 * cfg.crop_fraction).round() as usize).clamp(1, h);
        let crop_w = ((w as f64 * cfg.crop_fraction).round() as usize).clamp(1, w);
        if crop_h < h || crop_w < w {
            let y0 = (fy * (h - crop_h) as f64).round() as usize;
            let x0 = (fx * (w - crop_w) as f64).round() as usize;
            let src = out.as_slice().unwrap().to_vec();
            let dst = out.as_slice_mut().unwrap();
            // bilinear resize of the crop back to full resolution
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                for oy in 0..h {
                    let sy = y0 as f64 + (oy as f64 + 0.5) * crop_h as f64 / h as f64 - 0.5;
                    let sy0 = sy.floor().clamp(y0 as f64, (y0 + crop_h - 1) as f64) as usize;
                    let sy1 = (sy0 + 1).min(y0 + crop_h - 1);
                    let ty = E::from_f64((sy - sy0 as f64).clamp(0.0, 1.0));
                    for ox in 0..w {
                        let sx = x0 as f64 + (ox as f64 + 0.5) * crop_w as f64 / w as f64 - 0.5;
                        let sx0 = sx.floor().clamp(x0 as f64, (x0 + crop_w - 1) as f64) as usize;
                        let sx1 = (sx0 + 1).min(x0 + crop_w - 1);
                        let tx = E::from_f64((sx - sx0 as f64).clamp(0.0, 1.0));
                        let one = E::one();
                        let v00 = plane[sy0 * w + sx0];
                        let v01 = plane[sy0 * w + sx1];
                        let v10 = plane[sy1 * w + sx0];
                        let v11 = plane[sy1 * w + sx1];
                        let top = v00 * (one - tx) + v01 * tx;
                        let bot = v10 * (one - tx) + v11 * tx;
                        dst[(ch * h + oy) * w + ox] = top * (one - ty) + bot * ty;
                    }
                }
            }
        }
    }

    if let Some(shift) = params.brightness {
        let s = E::from_f64(shift);
        out.mapv_inplace(|v| v + s);
    }

    if params.flip {
        let buf = out.as_slice_mut().unwrap();
        for ch in 0..c {
            for y in 0..h {
                let row = &mut buf[(ch * h + y) * w..(ch * h + y + 1) * w];
                row.reverse();
            }
        }
    }

    let (zero, one) = (E::zero(), E::one());
    out.mapv_inplace(|v| v.max(zero).min(one));
    out
}
