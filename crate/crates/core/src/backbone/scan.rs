//! Selective scan: the input-dependent diagonal linear recurrence behind SS2D.
//!
//! Per channel `c` and state index `n`, with zero-order-hold discretization:
//!
//! ```text
//! Ā_t = exp(Δ_t[c] · A[c,n])      B̄_t = Δ_t[c] · B_t[n]
//! h_t = Ā_t · h_{t-1} + B̄_t · x_t[c]        h_0 = 0
//! y_t[c] = Σ_n C_t[n] · h_t[c,n] + D[c] · x_t[c]
//! ```
//!
//! The recurrence itself is evaluated by [`linear_recurrence`], either
//! step by step or in independent chunks whose carries are stitched together
//! afterwards (the chunks are what run in parallel).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScanStrategy {
    #[default]
    Sequential,
    /// Chunked evaluation; chunks are processed under the default [`Exec`] policy.
    Blocked { chunk: usize },
}

/// Solves `h_t = decay_t ⊙ h_{t-1} + drive_t` for `t = 0..len`, `h_{-1} = 0`.
///
/// `decay` and `drive` are `len × width` row-major; the result has the same layout.
pub fn linear_recurrence(decay: &[f64], drive: &[f64], width: usize, strategy: ScanStrategy) -> Vec<f64> {
    assert_eq!(decay.len(), drive.len());
    assert!(width > 0 && decay.len() % width == 0);
    match strategy {
        ScanStrategy::Sequential => recurrence_sequential(decay, drive, width),
        ScanStrategy::Blocked { chunk } => recurrence_blocked(decay, drive, width, chunk.max(1), Exec::default()),
    }
}

fn recurrence_sequential(decay: &[f64], drive: &[f64], width: usize) -> Vec<f64> {
    let mut h = drive.to_vec();
    let len = drive.len() / width;
    for t in 1..len {
        let (prev, cur) = h.split_at_mut(t * width);
        let prev = &prev[(t - 1) * width..];
        let a = &decay[t * width..(t + 1) * width];
        for ((hc, &hp), &at) in cur[..width].iter_mut().zip(prev).zip(a) {
            *hc += at * hp;
        }
    }
    h
}

/// Three-phase chunked scan: local scans from zero, sequential carry
/// propagation across chunk boundaries, then a parallel fix-up.
pub fn recurrence_blocked(decay: &[f64], drive: &[f64], width: usize, chunk: usize, exec: Exec) -> Vec<f64> {
    let len = drive.len() / width;
    let block = chunk * width;
    let mut local = drive.to_vec();
    let mut prod = decay.to_vec();

    // Phase 1: within each chunk, local state from zero and running decay product.
    let decay_ref = decay;
    {
        let mut pairs: Vec<(&mut [f64], &mut [f64])> =
            local.chunks_mut(block).zip(prod.chunks_mut(block)).collect();
        exec.for_each_chunk_mut(&mut pairs, 1, |ci, slot| {
            let (h, p) = &mut slot[0];
            let base = ci * block;
            let steps = h.len() / width;
            for s in 1..steps {
                let (prev, cur) = h.split_at_mut(s * width);
                let (pprev, pcur) = p.split_at_mut(s * width);
                let prev = &prev[(s - 1) * width..];
                let pprev = &pprev[(s - 1) * width..];
                let a = &decay_ref[base + s * width..base + (s + 1) * width];
                for k in 0..width {
                    cur[k] += a[k] * prev[k];
                    pcur[k] *= pprev[k];
                }
            }
        });
    }

    // Phase 2: carry-in for each chunk.
    let n_chunks = len.div_ceil(chunk);
    let mut carries = vec![0.0; n_chunks * width];
    for ci in 1..n_chunks {
        let last = ci * block - width;
        for k in 0..width {
            carries[ci * width + k] = local[last + k] + prod[last + k] * carries[(ci - 1) * width + k];
        }
    }

    // Phase 3: h_t = local_t + prod_t ⊙ carry.
    let prod_ref = &prod;
    let carries_ref = &carries;
    exec.for_each_chunk_mut(&mut local, block, |ci, h| {
        if ci == 0 {
            return;
        }
        let carry = &carries_ref[ci * width..(ci + 1) * width];
        let base = ci * block;
        for (i, v) in h.iter_mut().enumerate() {
            *v += prod_ref[base + i] * carry[i % width];
        }
    });
    local
}

/// Inputs to [`selective_scan_1d`]. `L` = sequence length, `C` = channels, `N` = state size.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    /// `L × C`
    pub x: ArrayView2<'a, f64>,
    /// `L × C`, step sizes (already positive)
    pub delta: ArrayView2<'a, f64>,
    /// `C × N`, continuous-time state decay (negative)
    pub a: ArrayView2<'a, f64>,
    /// `L × N`
    pub b: ArrayView2<'a, f64>,
    /// `L × N`
    pub c: ArrayView2<'a, f64>,
    /// `C`
    pub d: ArrayView1<'a, f64>,
}

impl ScanInputs<'_> {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x.nrows(), self.x.ncols(), self.a.ncols())
    }

    fn validate(&self) -> Result<()> {
        let (l, c, n) = self.dims();
        if l == 0 {
            return Err(Error::Shape("selective scan needs a sequence of length >= 1".into()));
        }
        let ok = self.delta.dim() == (l, c)
            && self.a.dim() == (c, n)
            && self.b.dim() == (l, n)
            && self.c.dim() == (l, n)
            && self.d.len() == c;
        if !ok {
            return Err(Error::Shape(format!(
                "selective scan shapes: x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {}",
                self.x.dim(),
                self.delta.dim(),
                self.a.dim(),
                self.b.dim(),
                self.c.dim(),
                self.d.len()
            )));
        }
        let finite = |v: ArrayView2<f64>| v.iter().all(|x| x.is_finite());
        if !(finite(self.x) && finite(self.delta) && finite(self.a) && finite(self.b) && finite(self.c))
            || !self.d.iter().all(|x| x.is_finite())
        {
            return Err(Error::Numeric("non-finite selective scan input".into()));
        }
        Ok(())
    }
}

/// Forward result; `states` and `decay` are `L × C × N` and kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub y: Array2<f64>,
    pub states: Vec<f64>,
    pub decay: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub dx: Array2<f64>,
    pub ddelta: Array2<f64>,
    pub da: Array2<f64>,
    pub db: Array2<f64>,
    pub dc: Array2<f64>,
    pub dd: Array1<f64>,
}

pub fn selective_scan_1d(inp: &ScanInputs, strategy: ScanStrategy) -> Result<ScanOutput> {
    inp.validate()?;
    let (l, c, n) = inp.dims();
    let w = c * n;
    let mut decay = vec![0.0; l * w];
    let mut drive = vec![0.0; l * w];
    for t in 0..l {
        for ch in 0..c {
            let dt = inp.delta[[t, ch]];
            let xv = inp.x[[t, ch]];
            let base = t * w + ch * n;
            for s in 0..n {
                decay[base + s] = (dt * inp.a[[ch, s]]).exp();
                drive[base + s] = dt * inp.b[[t, s]] * xv;
            }
        }
    }
    let states = linear_recurrence(&decay, &drive, w, strategy);
    let mut y = Array2::zeros((l, c));
    for t in 0..l {
        for ch in 0..c {
            let base = t * w + ch * n;
            let mut acc = inp.d[ch] * inp.x[[t, ch]];
            for s in 0..n {
                acc += inp.c[[t, s]] * states[base + s];
            }
            y[[t, ch]] = acc;
        }
    }
    Ok(ScanOutput { y, states, decay })
}

/// Reverse-mode gradients of [`selective_scan_1d`] given `dL/dy`.
///
/// The state adjoint obeys the reversed recurrence
/// `g_t = C_t ⊗ dy_t + Ā_{t+1} ⊙ g_{t+1}`, solved with the same primitive.
pub fn selective_scan_1d_backward(
    inp: &ScanInputs,
    out: &ScanOutput,
    dy: ArrayView2<f64>,
    strategy: ScanStrategy,
) -> ScanGrads {
    let (l, c, n) = inp.dims();
    let w = c * n;
    // reversed sequence: position s corresponds to t = l-1-s
    let mut rdecay = vec![0.0; l * w];
    let mut rdrive = vec![0.0; l * w];
    for s in 0..l {
        let t = l - 1 - s;
        for ch in 0..c {
            let g = dy[[t, ch]];
            for k in 0..n {
                rdrive[s * w + ch * n + k] = inp.c[[t, k]] * g;
            }
        }
        if s > 0 {
            rdecay[s * w..(s + 1) * w].copy_from_slice(&out.decay[(t + 1) * w..(t + 2) * w]);
        }
    }
    let radj = linear_recurrence(&rdecay, &rdrive, w, strategy);

    let mut dx = Array2::zeros((l, c));
    let mut ddelta = Array2::zeros((l, c));
    let mut da = Array2::zeros((c, n));
    let mut db = Array2::zeros((l, n));
    let mut dc = Array2::zeros((l, n));
    let mut dd = Array1::zeros(c);

    for t in 0..l {
        let adj = &radj[(l - 1 - t) * w..(l - t) * w];
        let h = &out.states[t * w..(t + 1) * w];
        let a_bar = &out.decay[t * w..(t + 1) * w];
        for ch in 0..c {
            let g_y = dy[[t, ch]];
            let xv = inp.x[[t, ch]];
            let dt = inp.delta[[t, ch]];
            dd[ch] += g_y * xv;
            let mut gx = inp.d[ch] * g_y;
            let mut gdt = 0.0;
            for k in 0..n {
                let idx = ch * n + k;
                let g = adj[idx];
                dc[[t, k]] += g_y * h[idx];
                let hprev = if t > 0 { out.states[(t - 1) * w + idx] } else { 0.0 };
                let bk = inp.b[[t, k]];
                gx += g * dt * bk;
                db[[t, k]] += g * dt * xv;
                let through_decay = g * a_bar[idx] * hprev;
                gdt += through_decay * inp.a[[ch, k]] + g * bk * xv;
                da[[ch, k]] += through_decay * dt;
            }
            dx[[t, ch]] = gx;
            ddelta[[t, ch]] = gdt;
        }
    }
    ScanGrads { dx, ddelta, da, db, dc, dd }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_decay_is_cumulative_sum() {
        let x = array![[1.0], [1.0], [1.0]];
        let delta = array![[1.0], [1.0], [1.0]];
        let a = array![[0.0]];
        let b = array![[1.0], [1.0], [1.0]];
        let c = b.clone();
        let d = array![0.0];
        let inp = ScanInputs { x: x.view(), delta: delta.view(), a: a.view(), b: b.view(), c: c.view(), d: d.view() };
        let out = selective_scan_1d(&inp, ScanStrategy::Sequential).unwrap();
        assert_eq!(out.y.column(0).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l, c, n) = (5, 2, 3);
        let x = Array2::from_shape_fn((l, c), |_| rng.random_range(-1.0..1.0));
        let delta = Array2::from_shape_fn((l, c), |_| rng.random_range(0.1..1.0));
        let a = Array2::from_elem((c, n), -1e300);
        let b = Array2::from_shape_fn((l, n), |_| rng.random_range(-1.0..1.0));
        let cm = Array2::from_shape_fn((l, n), |_| rng.random_range(-1.0..1.0));
        let d = Array1::from_vec(vec![0.3, -0.2]);
        let inp = ScanInputs { x: x.view(), delta: delta.view(), a: a.view(), b: b.view(), c: cm.view(), d: d.view() };
        let out = selective_scan_1d(&inp, ScanStrategy::Sequential).unwrap();
        for t in 0..l {
            for ch in 0..c {
                let expect: f64 = (0..n).map(|k| cm[[t, k]] * delta[[t, ch]] * b[[t, k]] * x[[t, ch]]).sum::<f64>()
                    + d[ch] * x[[t, ch]];
                assert!((out.y[[t, ch]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blocked_matches_sequential_for_uneven_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(len, width, chunk) in &[(1, 3, 4), (7, 2, 3), (33, 5, 8), (64, 1, 64), (65, 4, 16)] {
            let decay: Vec<f64> = (0..len * width).map(|_| rng.random_range(0.0..1.0)).collect();
            let drive: Vec<f64> = (0..len * width).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = linear_recurrence(&decay, &drive, width, ScanStrategy::Sequential);
            for exec in [Exec::Sequential, Exec::Parallel] {
                let b = recurrence_blocked(&decay, &drive, width, chunk, exec);
                for (u, v) in s.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
                }
            }
        }
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let z = Array2::<f64>::zeros((0, 1));
        let a = array![[-1.0]];
        let nb = Array2::<f64>::zeros((0, 1));
        let d = array![0.0];
        let inp = ScanInputs { x: z.view(), delta: z.view(), a: a.view(), b: nb.view(), c: nb.view(), d: d.view() };
        assert!(matches!(selective_scan_1d(&inp, ScanStrategy::Sequential), Err(Error::Shape(_))));

        let x = array![[f64::NAN]];
        let one = array![[1.0]];
        let inp = ScanInputs { x: x.view(), delta: one.view(), a: a.view(), b: one.view(), c: one.view(), d: d.view() };
        assert!(matches!(selective_scan_1d(&inp, ScanStrategy::Sequential), Err(Error::Numeric(_))));
    }
}
