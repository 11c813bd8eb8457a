//! The two-branch VSS block:
//! `out = x + CA(LN(FFN(SS2D(LN(x))) + SA(LN(x))))`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::attention::{ChannelAttention, ChannelCache, SpatialAttention, SpatialCache};
use super::scan::ScanStrategy;
use super::ss2d::{Ss2d, Ss2dCache};
use crate::error::Result;
use crate::nn::act::{gelu, gelu_grad};
use crate::nn::norm::LayerNormCache;
use crate::nn::{join, LayerNorm, Linear, Params};

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(width: usize, expansion: usize, rng: &mut R) -> Self {
        let hidden = width * expansion.max(1);
        Ffn {
            up: Linear::new(width, hidden, true, rng),
            down: Linear::new(hidden, width, true, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, FfnCache) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(act.view());
        (y, FfnCache { pre, act })
    }

    pub fn backward(&self, x: ArrayView2<f64>, cache: &FfnCache, dy: ArrayView2<f64>, grad: &mut Ffn) -> Array2<f64> {
        let dact = self.down.backward(cache.act.view(), dy, &mut grad.down);
        let dpre = dact * cache.pre.mapv(gelu_grad);
        self.up.backward(x, dpre.view(), &mut grad.up)
    }

    /// Zeroes the output layer so the block contributes nothing.
    pub fn zero_output(&mut self) {
        self.down.weight.fill(0.0);
        if let Some(b) = self.down.bias.as_mut() {
            b.fill(0.0);
        }
    }
}

impl Params for Ffn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VssBlock {
    pub ln_scan: LayerNorm,
    pub ss2d: Ss2d,
    pub ffn: Ffn,
    pub ln_spatial: LayerNorm,
    pub spatial: SpatialAttention,
    pub ln_merge: LayerNorm,
    pub channel: ChannelAttention,
}

#[derive(Debug, Clone)]
pub struct VssCache {
    ln_scan: LayerNormCache,
    ss2d: Ss2dCache,
    s: Array2<f64>,
    ffn: FfnCache,
    ln_spatial: LayerNormCache,
    n_spatial: Array2<f64>,
    spatial: SpatialCache,
    ln_merge: LayerNormCache,
    n_merge: Array2<f64>,
    channel: ChannelCache,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub channels: usize,
    pub state_dim: usize,
    pub ffn_expansion: usize,
    pub sa_kernel: usize,
    pub ca_reduction: usize,
}

impl VssBlock {
    pub fn new<R: Rng + ?Sized>(shape: BlockShape, rng: &mut R) -> Self {
        let c = shape.channels;
        VssBlock {
            ln_scan: LayerNorm::new(c),
            ss2d: Ss2d::new(c, shape.state_dim, rng),
            ffn: Ffn::new(c, shape.ffn_expansion, rng),
            ln_spatial: LayerNorm::new(c),
            spatial: SpatialAttention::new(shape.sa_kernel, rng),
            ln_merge: LayerNorm::new(c),
            channel: ChannelAttention::new(c, shape.ca_reduction, rng),
        }
    }

    /// Makes the residual branch output exactly zero: the FFN output layer,
    /// the affine map feeding spatial attention, and the post-sum shift.
    pub fn zero_branches(&mut self) {
        self.ffn.zero_output();
        self.ln_spatial.gamma.fill(0.0);
        self.ln_spatial.beta.fill(0.0);
        self.ln_merge.beta.fill(0.0);
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        h: usize,
        w: usize,
        strategy: ScanStrategy,
    ) -> Result<(Array2<f64>, VssCache)> {
        let (n_scan, ln_scan) = self.ln_scan.forward(x);
        let (s, ss2d) = self.ss2d.forward(n_scan.view(), h, w, strategy)?;
        let (f, ffn) = self.ffn.forward(s.view());
        let (n_spatial, ln_spatial) = self.ln_spatial.forward(x);
        let (a, spatial) = self.spatial.forward(n_spatial.view(), h, w);
        let m = f + a;
        let (n_merge, ln_merge) = self.ln_merge.forward(m.view());
        let (c, channel) = self.channel.forward(n_merge.view());
        let out = &x + &c;
        Ok((
            out,
            VssCache { ln_scan, ss2d, s, ffn, ln_spatial, n_spatial, spatial, ln_merge, n_merge, channel },
        ))
    }

    pub fn backward(
        &self,
        h: usize,
        w: usize,
        cache: &VssCache,
        dout: ArrayView2<f64>,
        grad: &mut VssBlock,
        strategy: ScanStrategy,
    ) -> Array2<f64> {
        let dn_merge = self.channel.backward(cache.n_merge.view(), &cache.channel, dout, &mut grad.channel);
        let dm = self.ln_merge.backward(&cache.ln_merge, dn_merge.view(), &mut grad.ln_merge);
        let dn_spatial =
            self.spatial.backward(cache.n_spatial.view(), h, w, &cache.spatial, dm.view(), &mut grad.spatial);
        let mut dx = dout.to_owned();
        dx += &self.ln_spatial.backward(&cache.ln_spatial, dn_spatial.view(), &mut grad.ln_spatial);
        let ds = self.ffn.backward(cache.s.view(), &cache.ffn, dm.view(), &mut grad.ffn);
        let dn_scan = self.ss2d.backward(&cache.ss2d, ds.view(), &mut grad.ss2d, strategy);
        dx += &self.ln_scan.backward(&cache.ln_scan, dn_scan.view(), &mut grad.ln_scan);
        dx
    }
}

impl Params for VssBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.ln_scan.visit(&join(prefix, "ln_scan"), f);
        self.ss2d.visit(&join(prefix, "ss2d"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.ln_spatial.visit(&join(prefix, "ln_spatial"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.ln_merge.visit(&join(prefix, "ln_merge"), f);
        self.channel.visit(&join(prefix, "channel"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.ln_scan.visit_mut(&join(prefix, "ln_scan"), f);
        self.ss2d.visit_mut(&join(prefix, "ss2d"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.ln_spatial.visit_mut(&join(prefix, "ln_spatial"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.ln_merge.visit_mut(&join(prefix, "ln_merge"), f);
        self.channel.visit_mut(&join(prefix, "channel"), f);
    }
}
