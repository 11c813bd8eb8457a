use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{join, visit_array1, visit_array1_mut, Params};

pub const LN_EPS: f64 = 1e-5;

/// LayerNorm over the last (channel) axis of a `tokens × channels` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let c = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / c;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let c = dy.ncols() as f64;
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, g, xh, &s| {
                let mg = g.sum() / c;
                let mgx = g.dot(&xh) / c;
                Zip::from(&mut out)
                    .and(&g)
                    .and(&xh)
                    .for_each(|o, &gi, &xi| *o = s * (gi - mg - xi * mgx));
            });
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array1(&join(prefix, "gamma"), &self.gamma, f);
        visit_array1(&join(prefix, "beta"), &self.beta, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array1_mut(&join(prefix, "gamma"), &mut self.gamma, f);
        visit_array1_mut(&join(prefix, "beta"), &mut self.beta, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalizes_rows() {
        let ln = LayerNorm::new(4);
        let (y, _) = ln.forward(array![[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]].view());
        let m: f64 = y.row(0).sum() / 4.0;
        assert!(m.abs() < 1e-12);
        // constant row maps to beta exactly
        assert!(y.row(1).iter().all(|&v| v == 0.0));
    }
}
