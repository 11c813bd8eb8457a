//! 2-D selective scan: four directional 1-D scans over a feature map, merged
//! by summation and followed by an output projection.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::scan::{selective_scan_1d, selective_scan_1d_backward, ScanInputs, ScanOutput, ScanStrategy};
use crate::error::Result;
use crate::nn::act::{sigmoid, softplus, softplus_inv};
use crate::nn::{join, visit_array1, visit_array1_mut, visit_array2, visit_array2_mut, Linear, Params};

/// Row-major forward, row-major backward, column-major forward, column-major backward.
pub const N_DIRECTIONS: usize = 4;

/// Token index visited at each sequence position for direction `dir`.
pub fn scan_order(dir: usize, h: usize, w: usize) -> Vec<usize> {
    let l = h * w;
    let col_major = |s: usize| (s % h) * w + s / h;
    match dir {
        0 => (0..l).collect(),
        1 => (0..l).rev().collect(),
        2 => (0..l).map(col_major).collect(),
        3 => (0..l).rev().map(col_major).collect(),
        _ => panic!("direction {dir} out of range"),
    }
}

/// Per-direction selective-scan parameters (`SsmParams`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScanDirection {
    /// `Δ = softplus(x W_Δᵀ + b_Δ)`, C → C
    pub delta_proj: Linear,
    /// C → N, no bias
    pub b_proj: Linear,
    /// C → N, no bias
    pub c_proj: Linear,
    /// `A = -exp(a_log)`, C × N
    pub a_log: Array2<f64>,
    /// skip gain, C
    pub d_skip: Array1<f64>,
}

impl ScanDirection {
    pub fn new<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let mut delta_proj = Linear::new(channels, channels, true, rng);
        // initial step sizes log-uniform in [1e-3, 1e-1]
        let bias = Array1::from_shape_fn(channels, |_| {
            let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            softplus_inv(dt)
        });
        delta_proj.bias = Some(bias);
        delta_proj.weight.mapv_inplace(|v| v * 0.1);
        ScanDirection {
            delta_proj,
            b_proj: Linear::new(channels, state_dim, false, rng),
            c_proj: Linear::new(channels, state_dim, false, rng),
            a_log: Array2::from_shape_fn((channels, state_dim), |(_, n)| ((n + 1) as f64).ln()),
            d_skip: Array1::ones(channels),
        }
    }

    pub fn a(&self) -> Array2<f64> {
        self.a_log.mapv(|v| -v.exp())
    }
}

impl Params for ScanDirection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.delta_proj.visit(&join(prefix, "delta_proj"), f);
        self.b_proj.visit(&join(prefix, "b_proj"), f);
        self.c_proj.visit(&join(prefix, "c_proj"), f);
        visit_array2(&join(prefix, "a_log"), &self.a_log, f);
        visit_array1(&join(prefix, "d_skip"), &self.d_skip, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.delta_proj.visit_mut(&join(prefix, "delta_proj"), f);
        self.b_proj.visit_mut(&join(prefix, "b_proj"), f);
        self.c_proj.visit_mut(&join(prefix, "c_proj"), f);
        visit_array2_mut(&join(prefix, "a_log"), &mut self.a_log, f);
        visit_array1_mut(&join(prefix, "d_skip"), &mut self.d_skip, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ss2d {
    pub directions: Vec<ScanDirection>,
    pub out_proj: Linear,
}

#[derive(Debug, Clone)]
struct DirectionCache {
    order: Vec<usize>,
    xs: Array2<f64>,
    pre_delta: Array2<f64>,
    delta: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
    scan: ScanOutput,
}

#[derive(Debug, Clone)]
pub struct Ss2dCache {
    dirs: Vec<DirectionCache>,
    merged: Array2<f64>,
}

fn gather(x: ArrayView2<f64>, order: &[usize]) -> Array2<f64> {
    x.select(Axis(0), order)
}

fn scatter_add(dst: &mut Array2<f64>, src: ArrayView2<f64>, order: &[usize]) {
    for (s, &tok) in order.iter().enumerate() {
        let mut row = dst.row_mut(tok);
        row += &src.row(s);
    }
}

impl Ss2d {
    pub fn new<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        Ss2d {
            directions: (0..N_DIRECTIONS).map(|_| ScanDirection::new(channels, state_dim, rng)).collect(),
            out_proj: Linear::new(channels, channels, true, rng),
        }
    }

    fn direction_forward(
        &self,
        dir: usize,
        x: ArrayView2<f64>,
        h: usize,
        w: usize,
        strategy: ScanStrategy,
    ) -> Result<DirectionCache> {
        let p = &self.directions[dir];
        let order = scan_order(dir, h, w);
        let xs = gather(x, &order);
        let pre_delta = p.delta_proj.forward(xs.view());
        let delta = pre_delta.mapv(softplus);
        let b = p.b_proj.forward(xs.view());
        let c = p.c_proj.forward(xs.view());
        let a = p.a();
        let scan = selective_scan_1d(
            &ScanInputs {
                x: xs.view(),
                delta: delta.view(),
                a: a.view(),
                b: b.view(),
                c: c.view(),
                d: p.d_skip.view(),
            },
            strategy,
        )?;
        Ok(DirectionCache { order, xs, pre_delta, delta, a, b, c, scan })
    }

    /// Output of one direction folded back to token order, before merging.
    pub fn direction_output(&self, dir: usize, x: ArrayView2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
        let dc = self.direction_forward(dir, x, h, w, ScanStrategy::Sequential)?;
        let mut out = Array2::zeros(x.raw_dim());
        scatter_add(&mut out, dc.scan.y.view(), &dc.order);
        Ok(out)
    }

    /// Sum of the four directional outputs, before the output projection.
    pub fn merged(&self, x: ArrayView2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
        Ok(self.forward(x, h, w, ScanStrategy::Sequential)?.1.merged)
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        h: usize,
        w: usize,
        strategy: ScanStrategy,
    ) -> Result<(Array2<f64>, Ss2dCache)> {
        let mut merged = Array2::zeros(x.raw_dim());
        let mut dirs = Vec::with_capacity(N_DIRECTIONS);
        for dir in 0..N_DIRECTIONS {
            let dc = self.direction_forward(dir, x, h, w, strategy)?;
            scatter_add(&mut merged, dc.scan.y.view(), &dc.order);
            dirs.push(dc);
        }
        let y = self.out_proj.forward(merged.view());
        Ok((y, Ss2dCache { dirs, merged }))
    }

    pub fn backward(
        &self,
        cache: &Ss2dCache,
        dy: ArrayView2<f64>,
        grad: &mut Ss2d,
        strategy: ScanStrategy,
    ) -> Array2<f64> {
        let dmerged = self.out_proj.backward(cache.merged.view(), dy, &mut grad.out_proj);
        let mut dx = Array2::zeros(dy.raw_dim());
        for (dir, dc) in cache.dirs.iter().enumerate() {
            let p = &self.directions[dir];
            let g = &mut grad.directions[dir];
            let dys = gather(dmerged.view(), &dc.order);
            let inp = ScanInputs {
                x: dc.xs.view(),
                delta: dc.delta.view(),
                a: dc.a.view(),
                b: dc.b.view(),
                c: dc.c.view(),
                d: p.d_skip.view(),
            };
            let sg = selective_scan_1d_backward(&inp, &dc.scan, dys.view(), strategy);
            let mut dxs = sg.dx;
            let dpre = &sg.ddelta * &dc.pre_delta.mapv(sigmoid);
            dxs += &p.delta_proj.backward(dc.xs.view(), dpre.view(), &mut g.delta_proj);
            dxs += &p.b_proj.backward(dc.xs.view(), sg.db.view(), &mut g.b_proj);
            dxs += &p.c_proj.backward(dc.xs.view(), sg.dc.view(), &mut g.c_proj);
            g.a_log += &(&sg.da * &dc.a);
            g.d_skip += &sg.dd;
            scatter_add(&mut dx, dxs.view(), &dc.order);
        }
        dx
    }
}

impl Params for Ss2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.directions.visit(&join(prefix, "dir"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.directions.visit_mut(&join(prefix, "dir"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}
