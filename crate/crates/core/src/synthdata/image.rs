//! Fundus-like canvases and severity-dependent lesion planting.

use ndarray::Array3;
use rand::Rng;

use super::{group_severity, Eye};

const FUNDUS_RGB: [f64; 3] = [0.62, 0.28, 0.14];
const DISC_RGB: [f64; 3] = [0.92, 0.78, 0.55];
const LESION_RGB: [f64; 3] = [1.0, 0.93, 0.45];
/// Blob radius per severity class at a 32-pixel canvas.
const CLASS_RADIUS: [f64; 4] = [0.0, 0.8, 1.3, 1.9];

/// Reddish disc with vignetting, a small optic disc on the nasal side, and mild texture.
pub fn fundus_background<R: Rng + ?Sized>(size: usize, eye: Eye, rng: &mut R) -> Array3<f64> {
    let s = size as f64;
    let centre = (s - 1.0) / 2.0;
    let disc_x = match eye {
        Eye::Right => centre + 0.32 * s,
        Eye::Left => centre - 0.32 * s,
    };
    let disc_r = 0.07 * s;
    let tint: f64 = rng.random_range(0.92..1.08);
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            let r2 = ((fx - centre).powi(2) + (fy - centre).powi(2)) / (0.5 * s).powi(2);
            let vignette = (1.0 - 0.55 * r2).max(0.05);
            let dd = ((fx - disc_x).powi(2) + (fy - centre).powi(2)).sqrt();
            let disc = (-(dd / disc_r).powi(2)).exp();
            let noise: f64 = rng.random_range(-0.02..0.02);
            for c in 0..3 {
                let base = FUNDUS_RGB[c] * tint * vignette;
                img[[c, y, x]] = (base * (1.0 - disc) + DISC_RGB[c] * disc + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Blends bright Gaussian blobs into `canvas`.
///
/// Blob count is `2·(severity − 1)` and blob radius steps up with the severity
/// class, so both number and area grow monotonically with severity. `strength`
/// in [0, 1] scales the blob opacity. Severity 1 plants nothing.
pub fn plant_lesions<R: Rng + ?Sized>(canvas: &Array3<f64>, severity: u8, strength: f64, rng: &mut R) -> Array3<f64> {
    let mut img = canvas.clone();
    let class = match group_severity(severity) {
        Ok(c) => c as usize,
        Err(_) => return img,
    };
    let (_, h, w) = img.dim();
    let scale = w as f64 / 32.0;
    let count = 2 * (severity as usize - 1);
    let centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let spread = 0.3 * w as f64;
    let mut blobs: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = spread * rng.random::<f64>().sqrt();
            let r = CLASS_RADIUS[class] * scale * rng.random_range(0.85..1.15);
            (centre.0 + rad * ang.cos(), centre.1 + rad * ang.sin(), r)
        })
        .collect();
    if class == 3 {
        // central atrophic patch for late disease
        blobs.push((centre.0, centre.1, 3.0 * scale));
    }
    for (bx, by, r) in blobs {
        let reach = (3.0 * r).ceil() as isize;
        let (cx, cy) = (bx.round() as isize, by.round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                let alpha = strength * (-d2 / (2.0 * r * r)).exp();
                if alpha < 1e-4 {
                    continue;
                }
                for c in 0..3 {
                    let p = &mut img[[c, y as usize, x as usize]];
                    *p = (*p * (1.0 - alpha) + LESION_RGB[c] * alpha).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Rounds to the nearest 8-bit level, matching what PNG storage keeps.
pub fn quantize(img: &Array3<f64>) -> Array3<f64> {
    img.mapv(|v| to_u8(v) as f64 / 255.0)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
