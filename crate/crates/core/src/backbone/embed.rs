//! Patch embedding and 2×2 patch-merge downsampling.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::norm::LayerNormCache;
use crate::nn::{join, LayerNorm, Linear, Params};

/// Non-overlapping `p × p` patches, linearly projected and layer-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PatchEmbedCache {
    patches: Array2<f64>,
    norm: LayerNormCache,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(patch: usize, channels: usize, rng: &mut R) -> Self {
        PatchEmbed {
            patch,
            proj: Linear::new(3 * patch * patch, channels, true, rng),
            norm: LayerNorm::new(channels),
        }
    }

    /// `3 × H × W` → rows of flattened patches (channel, dy, dx order), row-major over the grid.
    pub fn patchify(&self, image: &Array3<f64>) -> Result<(Array2<f64>, usize, usize)> {
        let (ch, h, w) = image.dim();
        let p = self.patch;
        if ch != 3 || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image {ch}×{h}×{w} is not 3-channel with sides divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Array2::zeros((gh * gw, 3 * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = out.row_mut(gy * gw + gx);
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = image[[c, gy * p + dy, gx * p + dx]];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok((out, gh, gw))
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(Array2<f64>, usize, usize, PatchEmbedCache)> {
        let (patches, gh, gw) = self.patchify(image)?;
        let z = self.proj.forward(patches.view());
        let (y, norm) = self.norm.forward(z.view());
        Ok((y, gh, gw, PatchEmbedCache { patches, norm }))
    }

    pub fn backward(&self, cache: &PatchEmbedCache, dy: ArrayView2<f64>, grad: &mut PatchEmbed) {
        let dz = self.norm.backward(&cache.norm, dy, &mut grad.norm);
        self.proj.backward(cache.patches.view(), dz.view(), &mut grad.proj);
    }
}

impl Params for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Concatenates each 2×2 neighbourhood (4C), normalizes, projects to the next width.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct PatchMergeCache {
    norm: LayerNormCache,
    normed: Array2<f64>,
    h: usize,
    w: usize,
}

impl PatchMerge {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        PatchMerge {
            norm: LayerNorm::new(4 * input),
            proj: Linear::new(4 * input, output, false, rng),
        }
    }

    fn gather(x: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
        let c = x.ncols();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array2::zeros((oh * ow, 4 * c));
        for r in 0..oh {
            for col in 0..ow {
                let mut row = out.row_mut(r * ow + col);
                for (q, (dy, dx)) in [(0, 0), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
                    let src = (2 * r + dy) * w + 2 * col + dx;
                    row.slice_mut(ndarray::s![q * c..(q + 1) * c]).assign(&x.row(src));
                }
            }
        }
        out
    }

    pub fn forward(&self, x: ArrayView2<f64>, h: usize, w: usize) -> Result<(Array2<f64>, PatchMergeCache)> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot 2×2-merge a {h}×{w} map")));
        }
        let cat = Self::gather(x, h, w);
        let (normed, norm) = self.norm.forward(cat.view());
        let y = self.proj.forward(normed.view());
        Ok((y, PatchMergeCache { norm, normed, h, w }))
    }

    pub fn backward(&self, cache: &PatchMergeCache, dy: ArrayView2<f64>, grad: &mut PatchMerge) -> Array2<f64> {
        let dnormed = self.proj.backward(cache.normed.view(), dy, &mut grad.proj);
        let dcat = self.norm.backward(&cache.norm, dnormed.view(), &mut grad.norm);
        let c = dcat.ncols() / 4;
        let (h, w) = (cache.h, cache.w);
        let ow = w / 2;
        let mut dx = Array2::zeros((h * w, c));
        for r in 0..h / 2 {
            for col in 0..ow {
                let row = dcat.row(r * ow + col);
                for (q, (dy, dxo)) in [(0, 0), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
                    let dst = (2 * r + dy) * w + 2 * col + dxo;
                    dx.row_mut(dst).assign(&row.slice(ndarray::s![q * c..(q + 1) * c]));
                }
            }
        }
        dx
    }
}

impl Params for PatchMerge {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_grid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pe = PatchEmbed::new(4, 6, &mut rng);
        let img = Array3::zeros((3, 32, 32));
        let (y, gh, gw, _) = pe.forward(&img).unwrap();
        assert_eq!((gh, gw, y.dim()), (8, 8, (64, 6)));
        assert!(pe.forward(&Array3::zeros((3, 30, 32))).is_err());
    }

    #[test]
    fn merge_gathers_neighbourhoods() {
        let x = Array2::from_shape_fn((16, 1), |(i, _)| i as f64);
        let cat = PatchMerge::gather(x.view(), 4, 4);
        assert_eq!(cat.row(0).to_vec(), vec![0.0, 4.0, 1.0, 5.0]);
        assert_eq!(cat.row(3).to_vec(), vec![10.0, 14.0, 11.0, 15.0]);
    }
}
