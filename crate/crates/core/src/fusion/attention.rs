//! Multi-head cross-attention from one query vector onto a set of key/value
//! vectors, with a hand-written backward pass.

use ndarray::{s, Array1, Array2};
use rand::Rng;

use crate::nn::act::softmax;
use crate::nn::{join, Linear, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct Mhsa {
    pub heads: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

#[derive(Debug, Clone)]
pub struct MhsaCache {
    q_in: Array1<f64>,
    kv_in: Array2<f64>,
    q: Array1<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// heads × keys
    attn: Array2<f64>,
    concat: Array1<f64>,
}

impl Mhsa {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        Mhsa {
            heads,
            w_q: Linear::new(dim, dim, false, rng),
            w_k: Linear::new(dim, dim, false, rng),
            w_v: Linear::new(dim, dim, false, rng),
            w_o: Linear::new(dim, dim, true, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.w_q.output_dim() / self.heads
    }

    /// `query` has width d; each row of `context` is one key/value source.
    pub fn forward(&self, query: &Array1<f64>, context: &Array2<f64>) -> (Array1<f64>, MhsaCache) {
        let q = self.w_q.forward_vec(query);
        let k = self.w_k.forward(context.view());
        let v = self.w_v.forward(context.view());
        let dh = self.head_dim();
        let m = context.nrows();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Array2::zeros((self.heads, m));
        let mut concat = Array1::zeros(q.len());
        for h in 0..self.heads {
            let r = h * dh..(h + 1) * dh;
            let qh = q.slice(s![r.clone()]);
            let scores: Vec<f64> = (0..m).map(|j| qh.dot(&k.slice(s![j, r.clone()])) * scale).collect();
            let a = softmax(&scores);
            for j in 0..m {
                attn[[h, j]] = a[j];
                concat.slice_mut(s![r.clone()]).scaled_add(a[j], &v.slice(s![j, r.clone()]));
            }
        }
        let out = self.w_o.forward_vec(&concat);
        (out, MhsaCache { q_in: query.clone(), kv_in: context.clone(), q, k, v, attn, concat })
    }

    /// Returns gradients with respect to the query and the context rows.
    pub fn backward(&self, cache: &MhsaCache, dout: &Array1<f64>, grad: &mut Mhsa) -> (Array1<f64>, Array2<f64>) {
        let dconcat = self.w_o.backward_vec(&cache.concat, dout, &mut grad.w_o);
        let dh = self.head_dim();
        let m = cache.k.nrows();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array1::zeros(cache.q.len());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for h in 0..self.heads {
            let r = h * dh..(h + 1) * dh;
            let dc = dconcat.slice(s![r.clone()]);
            let a = cache.attn.row(h);
            let da: Vec<f64> = (0..m).map(|j| dc.dot(&cache.v.slice(s![j, r.clone()]))).collect();
            let mean: f64 = (0..m).map(|j| a[j] * da[j]).sum();
            for j in 0..m {
                dv.slice_mut(s![j, r.clone()]).scaled_add(a[j], &dc);
                let ds = a[j] * (da[j] - mean) * scale;
                if ds != 0.0 {
                    dq.slice_mut(s![r.clone()]).scaled_add(ds, &cache.k.slice(s![j, r.clone()]));
                    dk.slice_mut(s![j, r.clone()]).scaled_add(ds, &cache.q.slice(s![r.clone()]));
                }
            }
        }
        let dquery = self.w_q.backward_vec(&cache.q_in, &dq, &mut grad.w_q);
        let mut dctx = self.w_k.backward(cache.kv_in.view(), dk.view(), &mut grad.w_k);
        dctx += &self.w_v.backward(cache.kv_in.view(), dv.view(), &mut grad.w_v);
        (dquery, dctx)
    }
}

impl Params for Mhsa {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.w_q.visit(&join(prefix, "w_q"), f);
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        self.w_o.visit(&join(prefix, "w_o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.w_q.visit_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        self.w_o.visit_mut(&join(prefix, "w_o"), f);
    }
}
