use super::{flatten, load_flat, Params};

/// Adam with bias correction, operating on flattened parameters.
/// A non-zero `weight_decay` gives the decoupled (AdamW) variant.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let mut p = flatten(params);
        let g = flatten(grads);
        self.step_flat(&mut p, &g);
        load_flat(params, &p);
    }

    pub fn step_flat(&mut self, p: &mut [f64], g: &[f64]) {
        assert_eq!(p.len(), g.len());
        if self.m.len() != p.len() {
            self.m = vec![0.0; p.len()];
            self.v = vec![0.0; p.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            p[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
    }
}
