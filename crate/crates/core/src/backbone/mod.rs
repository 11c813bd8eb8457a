//! Selective-scan vision encoder.
//!
//! Patch embedding, then four stages of VSS blocks with 2×2 patch-merge
//! downsampling between them. The output of each stage is captured, giving
//! feature maps at strides `p, 2p, 4p, 8p`.

pub mod attention;
pub mod block;
pub mod embed;
pub mod scan;
pub mod ss2d;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Params};
use block::{BlockShape, VssBlock, VssCache};
use embed::{PatchEmbed, PatchEmbedCache, PatchMerge, PatchMergeCache};
pub use scan::ScanStrategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub state_dim: usize,
    pub ffn_expansion: usize,
    /// Spatial-attention convolution kernel (odd).
    pub sa_kernel: usize,
    /// Channel-attention bottleneck reduction ratio.
    pub ca_reduction: usize,
    pub scan: ScanStrategy,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            stage_channels: [24, 48, 96, 192],
            blocks_per_stage: [1, 1, 2, 1],
            state_dim: 8,
            ffn_expansion: 4,
            sa_kernel: 7,
            ca_reduction: 4,
            scan: ScanStrategy::Sequential,
        }
    }
}

impl BackboneConfig {
    /// Final feature width `d`.
    pub fn embed_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Side lengths of f1..f4.
    pub fn feature_sizes(&self) -> [usize; 4] {
        let g = self.image_size / self.patch_size.max(1);
        [g, g / 2, g / 4, g / 8]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("backbone config: {m}")));
        if self.stage_channels.iter().any(|&c| c == 0) || self.state_dim == 0 || self.ffn_expansion == 0 {
            return bad("all widths must be > 0".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("patch size {} must divide image size {}", self.patch_size, self.image_size));
        }
        let g = self.image_size / self.patch_size;
        if g == 0 || g % 8 != 0 {
            return bad(format!("patch grid {g} must be a positive multiple of 8 for three 2× downsamples"));
        }
        if self.sa_kernel % 2 == 0 {
            return bad("spatial attention kernel must be odd".into());
        }
        if let ScanStrategy::Blocked { chunk: 0 } = self.scan {
            return bad("scan chunk must be > 0".into());
        }
        Ok(())
    }
}

/// A `h × w` map stored as `(h·w) × channels`, tokens in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Global average over spatial positions.
    pub fn pooled(&self) -> Array1<f64> {
        self.data.mean_axis(Axis(0)).expect("non-empty map")
    }
}

/// f1..f4, highest to lowest resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures {
    pub maps: [FeatureMap; 4],
}

impl MultiScaleFeatures {
    pub fn pooled(&self) -> [Array1<f64>; 4] {
        [0, 1, 2, 3].map(|i| self.maps[i].pooled())
    }

    pub fn f4(&self) -> &FeatureMap {
        &self.maps[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<VssBlock>>,
    pub merges: Vec<PatchMerge>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    embed: PatchEmbedCache,
    blocks: Vec<Vec<VssCache>>,
    merges: Vec<PatchMergeCache>,
    sizes: [(usize, usize); 4],
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.stage_channels;
        let embed = PatchEmbed::new(config.patch_size, ch[0], &mut rng);
        let stages = (0..4)
            .map(|s| {
                let shape = BlockShape {
                    channels: ch[s],
                    state_dim: config.state_dim,
                    ffn_expansion: config.ffn_expansion,
                    sa_kernel: config.sa_kernel,
                    ca_reduction: config.ca_reduction,
                };
                (0..config.blocks_per_stage[s]).map(|_| VssBlock::new(shape, &mut rng)).collect()
            })
            .collect();
        let merges = (0..3).map(|s| PatchMerge::new(ch[s], ch[s + 1], &mut rng)).collect();
        Ok(Backbone { config, embed, stages, merges })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(MultiScaleFeatures, BackboneCache)> {
        let (_, h, w) = image.dim();
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Shape(format!(
                "image is {h}×{w}, backbone expects {0}×{0}",
                self.config.image_size
            )));
        }
        let strategy = self.config.scan;
        let (mut x, mut gh, mut gw, embed) = self.embed.forward(image)?;
        let mut blocks = Vec::with_capacity(4);
        let mut merges = Vec::with_capacity(3);
        let mut maps = Vec::with_capacity(4);
        let mut sizes = [(0, 0); 4];
        for s in 0..4 {
            let mut caches = Vec::with_capacity(self.stages[s].len());
            for blk in &self.stages[s] {
                let (y, c) = blk.forward(x.view(), gh, gw, strategy)?;
                x = y;
                caches.push(c);
            }
            blocks.push(caches);
            sizes[s] = (gh, gw);
            maps.push(FeatureMap { h: gh, w: gw, data: x.clone() });
            if s < 3 {
                let (y, c) = self.merges[s].forward(x.view(), gh, gw)?;
                x = y;
                merges.push(c);
                gh /= 2;
                gw /= 2;
            }
        }
        if maps.iter().any(|m| m.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("backbone produced non-finite features".into()));
        }
        let maps: [FeatureMap; 4] = maps.try_into().expect("four stages");
        Ok((MultiScaleFeatures { maps }, BackboneCache { embed, blocks, merges, sizes }))
    }

    /// Inference-only forward.
    pub fn features(&self, image: &Array3<f64>) -> Result<MultiScaleFeatures> {
        Ok(self.forward(image)?.0)
    }

    /// Backpropagates gradients arriving at any subset of f1..f4.
    pub fn backward(&self, cache: &BackboneCache, dmaps: &[Option<Array2<f64>>; 4], grad: &mut Backbone) {
        let strategy = self.config.scan;
        let mut dx: Option<Array2<f64>> = None;
        for s in (0..4).rev() {
            let (gh, gw) = cache.sizes[s];
            let mut d = match (dx.take(), &dmaps[s]) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b.clone(),
                (None, None) => Array2::zeros((gh * gw, self.config.stage_channels[s])),
            };
            for (b, blk) in self.stages[s].iter().enumerate().rev() {
                d = blk.backward(gh, gw, &cache.blocks[s][b], d.view(), &mut grad.stages[s][b], strategy);
            }
            if s > 0 {
                dx = Some(self.merges[s - 1].backward(&cache.merges[s - 1], d.view(), &mut grad.merges[s - 1]));
            } else {
                self.embed.backward(&cache.embed, d.view(), &mut grad.embed);
            }
        }
    }
}

impl Params for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (s, blocks) in self.stages.iter().enumerate() {
            blocks.visit(&join(prefix, &format!("stage{s}")), f);
        }
        self.merges.visit(&join(prefix, "merge"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            blocks.visit_mut(&join(prefix, &format!("stage{s}")), f);
        }
        self.merges.visit_mut(&join(prefix, "merge"), f);
    }
}
