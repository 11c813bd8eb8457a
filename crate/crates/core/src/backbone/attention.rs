//! Gating attention used inside the VSS block: CBAM-style spatial attention
//! and squeeze-and-excitation channel attention. Both rescale their input by
//! gates in (0, 1).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::nn::act::sigmoid;
use crate::nn::{join, visit_array1, visit_array1_mut, visit_array2, visit_array2_mut, Linear, Params};

/// Per-position gate from channel-pooled mean and max, mixed by a `k × k` convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttention {
    pub kernel: usize,
    /// `2 × k²`: row 0 mixes the channel mean, row 1 the channel max
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SpatialCache {
    pooled: [Vec<f64>; 2],
    argmax: Vec<usize>,
    gate: Vec<f64>,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "spatial attention kernel must be odd");
        let bound = 1.0 / ((2 * kernel * kernel) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        SpatialAttention {
            kernel,
            weight: Array2::from_shape_fn((2, kernel * kernel), |_| dist.sample(rng)),
            bias: Array1::zeros(1),
        }
    }

    fn conv(&self, pooled: &[Vec<f64>; 2], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel as isize;
        let pad = k / 2;
        let mut z = vec![self.bias[0]; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut acc = 0.0;
                for ky in 0..k {
                    let rr = r + ky - pad;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let cc = c + kx - pad;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let src = (rr * w as isize + cc) as usize;
                        let widx = (ky * k + kx) as usize;
                        acc += self.weight[[0, widx]] * pooled[0][src] + self.weight[[1, widx]] * pooled[1][src];
                    }
                }
                z[(r * w as isize + c) as usize] += acc;
            }
        }
        z
    }

    /// The per-position gate values (length `h·w`).
    pub fn gate(&self, x: ArrayView2<f64>, h: usize, w: usize) -> Vec<f64> {
        self.forward(x, h, w).1.gate
    }

    pub fn forward(&self, x: ArrayView2<f64>, h: usize, w: usize) -> (Array2<f64>, SpatialCache) {
        let l = x.nrows();
        let cdim = x.ncols() as f64;
        let mut mean = vec![0.0; l];
        let mut maxv = vec![0.0; l];
        let mut argmax = vec![0; l];
        for (p, row) in x.rows().into_iter().enumerate() {
            mean[p] = row.sum() / cdim;
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for (i, &v) in row.iter().enumerate() {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            maxv[p] = bv;
            argmax[p] = bi;
        }
        let pooled = [mean, maxv];
        let gate: Vec<f64> = self.conv(&pooled, h, w).into_iter().map(sigmoid).collect();
        let mut y = x.to_owned();
        for (mut row, &g) in y.rows_mut().into_iter().zip(&gate) {
            row *= g;
        }
        (y, SpatialCache { pooled, argmax, gate })
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        h: usize,
        w: usize,
        cache: &SpatialCache,
        dy: ArrayView2<f64>,
        grad: &mut SpatialAttention,
    ) -> Array2<f64> {
        let l = x.nrows();
        let cdim = x.ncols();
        let dz: Vec<f64> = (0..l)
            .map(|p| {
                let dg = dy.row(p).dot(&x.row(p));
                let g = cache.gate[p];
                dg * g * (1.0 - g)
            })
            .collect();
        grad.bias[0] += dz.iter().sum::<f64>();
        let k = self.kernel as isize;
        let pad = k / 2;
        let mut dpooled = [vec![0.0; l], vec![0.0; l]];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let g = dz[(r * w as isize + c) as usize];
                for ky in 0..k {
                    let rr = r + ky - pad;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let cc = c + kx - pad;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let src = (rr * w as isize + cc) as usize;
                        let widx = (ky * k + kx) as usize;
                        for ch in 0..2 {
                            grad.weight[[ch, widx]] += g * cache.pooled[ch][src];
                            dpooled[ch][src] += g * self.weight[[ch, widx]];
                        }
                    }
                }
            }
        }
        let mut dx = dy.to_owned();
        for p in 0..l {
            let mut row = dx.row_mut(p);
            row *= cache.gate[p];
            let dm = dpooled[0][p] / cdim as f64;
            row.mapv_inplace(|v| v + dm);
            row[cache.argmax[p]] += dpooled[1][p];
        }
        dx
    }
}

impl Params for SpatialAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(&join(prefix, "weight"), &self.weight, f);
        visit_array1(&join(prefix, "bias"), &self.bias, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(&join(prefix, "weight"), &mut self.weight, f);
        visit_array1_mut(&join(prefix, "bias"), &mut self.bias, f);
    }
}

/// Squeeze-and-excitation: global average pool, bottleneck MLP, sigmoid gate per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
}

#[derive(Debug, Clone)]
pub struct ChannelCache {
    pooled: Array1<f64>,
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
    gate: Array1<f64>,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        ChannelAttention {
            squeeze: Linear::new(channels, hidden, true, rng),
            excite: Linear::new(hidden, channels, true, rng),
        }
    }

    pub fn gate(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.forward(x).1.gate
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, ChannelCache) {
        let pooled = x.mean_axis(Axis(0)).expect("non-empty map");
        let hidden_pre = self.squeeze.forward_vec(&pooled);
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let gate = self.excite.forward_vec(&hidden).mapv(sigmoid);
        let y = &x * &gate;
        (y, ChannelCache { pooled, hidden_pre, hidden, gate })
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &ChannelCache,
        dy: ArrayView2<f64>,
        grad: &mut ChannelAttention,
    ) -> Array2<f64> {
        let dgate = (&dy * &x).sum_axis(Axis(0));
        let dz = &dgate * &cache.gate.mapv(|g| g * (1.0 - g));
        let dh = self.excite.backward_vec(&cache.hidden, &dz, &mut grad.excite);
        let dh_pre = Array1::from_iter(dh.iter().zip(&cache.hidden_pre).map(|(g, &p)| if p > 0.0 { *g } else { 0.0 }));
        let dpool = self.squeeze.backward_vec(&cache.pooled, &dh_pre, &mut grad.squeeze);
        let mut dx = &dy * &cache.gate;
        dx += &(dpool / x.nrows() as f64);
        dx
    }
}

impl Params for ChannelAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.excite.visit(&join(prefix, "excite"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.squeeze.visit_mut(&join(prefix, "squeeze"), f);
        self.excite.visit_mut(&join(prefix, "excite"), f);
    }
}
