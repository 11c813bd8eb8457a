use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{join, visit_array1, visit_array1_mut, visit_array2, visit_array2_mut, Params};

/// Affine map applied to the rows of a matrix: `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) init, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let weight = Array2::from_shape_fn((output, input), |_| dist.sample(rng));
        Linear {
            weight,
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut y = self.weight.dot(x);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight)
    }

    pub fn backward_vec(&self, x: &Array1<f64>, dy: &Array1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (i, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                grad.weight.row_mut(i).scaled_add(g, x);
            }
        }
        if let Some(gb) = grad.bias.as_mut() {
            *gb += dy;
        }
        self.weight.t().dot(dy)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(&join(prefix, "weight"), &self.weight, f);
        if let Some(b) = &self.bias {
            visit_array1(&join(prefix, "bias"), b, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(&join(prefix, "weight"), &mut self.weight, f);
        if let Some(b) = self.bias.as_mut() {
            visit_array1_mut(&join(prefix, "bias"), b, f);
        }
    }
}
