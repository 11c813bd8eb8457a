//! Training-time image augmentation and fixed per-channel normalization.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// ImageNet channel means (RGB).
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// ImageNet channel standard deviations (RGB).
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { max_rotation_deg: 10.0, hflip_prob: 0.5, enabled: true }
    }
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize(image: &Array3<f64>) -> Array3<f64> {
    let mut out = image.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (CHANNEL_MEAN[c % 3], CHANNEL_STD[c % 3]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

pub fn hflip(image: &Array3<f64>) -> Array3<f64> {
    let (_, _, w) = image.dim();
    Array3::from_shape_fn(image.dim(), |(c, y, x)| image[[c, y, w - 1 - x]])
}

/// Rotation about the image centre with bilinear sampling; pixels mapped
/// from outside the frame are zero. An angle of exactly zero is a copy.
pub fn rotate(image: &Array3<f64>, degrees: f64) -> Array3<f64> {
    if degrees == 0.0 {
        return image.clone();
    }
    let (ch, h, w) = image.dim();
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((ch, h, w));
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel -> source location
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for k in 0..ch {
                let mut acc = 0.0;
                for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let (py, px) = (y0 + oy, x0 + ox);
                        if wy * wx == 0.0 || py < 0.0 || px < 0.0 || py >= h as f64 || px >= w as f64 {
                            continue;
                        }
                        acc += wy * wx * image[[k, py as usize, px as usize]];
                    }
                }
                out[[k, y, x]] = acc;
            }
        }
    }
    out
}

/// Deterministic augmentation for a given angle and flip decision,
/// followed by normalization.
pub fn augment_with(image: &Array3<f64>, degrees: f64, flip: bool) -> Array3<f64> {
    let mut img = rotate(image, degrees);
    if flip {
        img = hflip(&img);
    }
    normalize(&img)
}

/// Draws an angle and a flip from `rng` and applies them; with augmentation
/// disabled only normalization is applied (the evaluation path).
pub fn augment<R: Rng + ?Sized>(image: &Array3<f64>, cfg: &AugmentConfig, rng: &mut R) -> Array3<f64> {
    if !cfg.enabled {
        return normalize(image);
    }
    let m = cfg.max_rotation_deg.abs();
    let angle = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let flip = rng.random::<f64>() < cfg.hflip_prob;
    augment_with(image, angle, flip)
}
