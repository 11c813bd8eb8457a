//! Learnable class prototypes, cosine logits and the metric cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::act::{log_sum_exp, softmax};
use crate::nn::{visit_array2, visit_array2_mut, Params};

/// Smallest prototype norm kept after an update.
pub const MIN_PROTOTYPE_NORM: f64 = 1e-6;

/// `C × d` prototype matrix, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub g: Array2<f64>,
}

impl PrototypeBank {
    /// Rows drawn uniformly from `[-1, 1]`.
    pub fn new<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let mut bank = PrototypeBank { g: Array2::from_shape_fn((classes, dim), |_| rng.random_range(-1.0..1.0)) };
        bank.enforce_min_norm();
        bank
    }

    pub fn from_rows(g: Array2<f64>) -> Result<Self> {
        let bank = PrototypeBank { g };
        if bank.g.nrows() == 0 || bank.g.ncols() == 0 {
            return Err(Error::Shape("prototype bank must be non-empty".into()));
        }
        Ok(bank)
    }

    pub fn n_classes(&self) -> usize {
        self.g.nrows()
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn norms(&self) -> Array1<f64> {
        self.g.map_axis(Axis(1), |r| r.dot(&r).sqrt())
    }

    /// Rescales any row shorter than [`MIN_PROTOTYPE_NORM`] up to that norm.
    /// An exactly zero row becomes `MIN_PROTOTYPE_NORM · e_0`.
    pub fn enforce_min_norm(&mut self) {
        for mut row in self.g.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n >= MIN_PROTOTYPE_NORM {
                continue;
            }
            if n > 0.0 {
                row *= MIN_PROTOTYPE_NORM / n;
            } else {
                row.fill(0.0);
                row[0] = MIN_PROTOTYPE_NORM;
            }
        }
    }
}

impl Params for PrototypeBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(&crate::nn::join(prefix, "g"), &self.g, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(&crate::nn::join(prefix, "g"), &mut self.g, f);
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `y_i = f·g_i / (‖f‖ ‖g_i‖)`.
pub fn cosine_logits(f: ArrayView1<f64>, bank: &PrototypeBank) -> Result<Array1<f64>> {
    if f.len() != bank.dim() {
        return Err(Error::Shape(format!("feature width {} vs prototype width {}", f.len(), bank.dim())));
    }
    let nf = norm(f);
    if !(nf > 0.0) || !nf.is_finite() {
        return Err(Error::Numeric(format!("cosine logits need a non-zero finite feature (norm {nf})")));
    }
    let ng = bank.norms();
    if let Some(i) = ng.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::Numeric(format!("prototype {i} has zero norm")));
    }
    Ok(Array1::from_shape_fn(bank.n_classes(), |i| {
        (bank.g.row(i).dot(&f) / (nf * ng[i])).clamp(-1.0, 1.0)
    }))
}

/// Backpropagates `dy` (gradient w.r.t. the logits) to the feature and,
/// accumulated into `grad`, the prototypes. Returns `df`.
pub fn cosine_logits_backward(
    f: ArrayView1<f64>,
    bank: &PrototypeBank,
    logits: &Array1<f64>,
    dy: &Array1<f64>,
    grad: &mut PrototypeBank,
) -> Array1<f64> {
    let nf = norm(f);
    let ng = bank.norms();
    let mut df = Array1::zeros(f.len());
    for i in 0..bank.n_classes() {
        if dy[i] == 0.0 {
            continue;
        }
        let g = bank.g.row(i);
        let c = logits[i];
        df.scaled_add(dy[i] / (nf * ng[i]), &g);
        df.scaled_add(-dy[i] * c / (nf * nf), &f);
        let mut gi = grad.g.row_mut(i);
        gi.scaled_add(dy[i] / (nf * ng[i]), &f);
        gi.scaled_add(-dy[i] * c / (ng[i] * ng[i]), &g);
    }
    df
}

/// `-log softmax(scale · logits)[y]`. `scale = 1` is the unscaled loss.
pub fn metric_ce_loss(logits: &Array1<f64>, y: usize, scale: f64) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::Domain(format!("class {y} out of range for {} logits", logits.len())));
    }
    let z: Vec<f64> = logits.iter().map(|v| v * scale).collect();
    Ok(log_sum_exp(&z) - z[y])
}

/// Gradient of [`metric_ce_loss`] with respect to the (unscaled) logits.
pub fn metric_ce_grad(logits: &Array1<f64>, y: usize, scale: f64) -> Array1<f64> {
    let z: Vec<f64> = logits.iter().map(|v| v * scale).collect();
    let mut p = Array1::from_vec(softmax(&z));
    p[y] -= 1.0;
    p * scale
}

/// Loss range attainable with logits in `[-1, 1]` for `classes` classes.
pub fn metric_ce_bounds(classes: usize) -> (f64, f64) {
    let k = (classes - 1) as f64;
    let e = std::f64::consts::E;
    let lo = -(e / (e + k / e)).ln();
    let hi = -((1.0 / e) / (1.0 / e + k * e)).ln();
    (lo, hi)
}
