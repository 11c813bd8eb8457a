use ndarray::{Array1, Array2};
use prognosis::backbone::scan::{selective_scan_1d, selective_scan_1d_backward, ScanInputs, ScanStrategy};
use prognosis::backbone::ss2d::Ss2d;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct ScanDraw {
    pub x: Array2<f64>,
    pub delta: Array2<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub d: Array1<f64>,
}

impl ScanDraw {
    pub fn random(len: usize, channels: usize, state: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = |r: usize, c: usize, lo: f64, hi: f64| Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi));
        let x = m(len, channels, -1.0, 1.0);
        let delta = m(len, channels, 1e-3, 0.5);
        let a = m(channels, state, -4.0, -0.01);
        let b = m(len, state, -1.0, 1.0);
        let c = m(len, state, -1.0, 1.0);
        let d = Array1::from_shape_fn(channels, |_| rng.random_range(-1.0..1.0));
        ScanDraw { x, delta, a, b, c, d }
    }

    pub fn inputs(&self) -> ScanInputs<'_> {
        ScanInputs {
            x: self.x.view(),
            delta: self.delta.view(),
            a: self.a.view(),
            b: self.b.view(),
            c: self.c.view(),
            d: self.d.view(),
        }
    }
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (u, v)| m.max((u - v).abs())) / scale
}

/// Worst relative deviation of the blocked scan (forward and backward) from
/// the step-by-step recurrence over lengths `1..=max_len`, `draws` parameter draws each.
pub fn blocked_vs_sequential(max_len: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for draw in 0..draws {
        for len in 1..=max_len {
            let (ch, st) = (1 + draw % 3, 1 + (draw + len) % 4);
            let p = ScanDraw::random(len, ch, st, &mut rng);
            let chunk = 1 + (draw * 7 + len) % 37;
            let inp = p.inputs();
            let seq = selective_scan_1d(&inp, ScanStrategy::Sequential).unwrap();
            let blk = selective_scan_1d(&inp, ScanStrategy::Blocked { chunk }).unwrap();
            worst = worst.max(rel(&blk.y, &seq.y));
            if len % 16 == 1 {
                let dy = Array2::from_shape_fn(seq.y.dim(), |_| rng.random_range(-1.0..1.0));
                let gs = selective_scan_1d_backward(&inp, &seq, dy.view(), ScanStrategy::Sequential);
                let gb = selective_scan_1d_backward(&inp, &blk, dy.view(), ScanStrategy::Blocked { chunk });
                for (u, v) in [(&gb.dx, &gs.dx), (&gb.ddelta, &gs.ddelta), (&gb.da, &gs.da), (&gb.db, &gs.db)] {
                    worst = worst.max(rel(u, v));
                }
            }
        }
    }
    worst
}

/// With every state forgotten immediately and all four directions sharing
/// parameters, the merged SS2D map is four times one direction's map.
/// Returns the worst absolute deviation.
pub fn memoryless_ss2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (4, 5, 3);
    let mut ss = Ss2d::new(c, 4, &mut rng);
    ss.directions[0].a_log.fill(700.0);
    let first = ss.directions[0].clone();
    for d in ss.directions.iter_mut() {
        *d = first.clone();
    }
    let x = Array2::from_shape_fn((h * w, c), |_| rng.random_range(-1.0..1.0));
    let merged = ss.merged(x.view(), h, w).unwrap();
    let single = ss.direction_output(0, x.view(), h, w).unwrap();
    merged.iter().zip(&single).fold(0.0f64, |m, (a, b)| m.max((a - 4.0 * b).abs()))
}
