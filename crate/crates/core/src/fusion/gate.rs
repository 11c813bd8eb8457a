//! Prototype gating of the fused query: `u = q + q ⊙ ĝ`.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::act::softmax;
use crate::pretrain::prototype::{cosine_logits, cosine_logits_backward, PrototypeBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Prototype of the most similar class (ties to the lowest index).
    #[default]
    Hard,
    /// Probability-weighted mix of all prototypes.
    Soft,
    None,
}

/// Class selected by the hard gate.
pub fn hard_class(f4: ArrayView1<f64>, bank: &PrototypeBank) -> Result<usize> {
    Ok(crate::pretrain::argmax(&cosine_logits(f4, bank)?))
}

/// The vector `ĝ` multiplied into the query; all zeros for `GateMode::None`.
pub fn gate_vector(f4: ArrayView1<f64>, bank: &PrototypeBank, mode: GateMode) -> Result<Array1<f64>> {
    match mode {
        GateMode::None => Ok(Array1::zeros(bank.dim())),
        GateMode::Hard => Ok(bank.g.row(hard_class(f4, bank)?).to_owned()),
        GateMode::Soft => {
            let p = softmax(cosine_logits(f4, bank)?.as_slice().expect("contiguous"));
            Ok(p.iter().zip(bank.g.rows()).fold(Array1::zeros(bank.dim()), |acc, (w, g)| acc + &(&g * *w)))
        }
    }
}

/// `q + q ⊙ g` for an explicit gate vector.
pub fn apply_gate(q: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
    q + &(q * g)
}

/// `u* = q4 + q4 ⊙ ĝ`.
pub fn prototype_gate(q4: &Array1<f64>, f4: ArrayView1<f64>, bank: &PrototypeBank, mode: GateMode) -> Result<Array1<f64>> {
    if mode == GateMode::None {
        return Ok(q4.clone());
    }
    Ok(apply_gate(q4, &gate_vector(f4, bank, mode)?))
}

/// Gradients of [`prototype_gate`]: returns `(dq4, df4)` and accumulates the
/// prototype gradient into `dbank`. The hard selection is piecewise
/// constant, so it contributes nothing to `df4`.
pub fn prototype_gate_backward(
    q4: &Array1<f64>,
    f4: ArrayView1<f64>,
    bank: &PrototypeBank,
    mode: GateMode,
    du: &Array1<f64>,
    dbank: &mut PrototypeBank,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let g = gate_vector(f4, bank, mode)?;
    let dq = du * &g.mapv(|v| 1.0 + v);
    let dg = du * q4;
    let mut df = Array1::zeros(f4.len());
    match mode {
        GateMode::None => {}
        GateMode::Hard => {
            let c = hard_class(f4, bank)?;
            let mut row = dbank.g.row_mut(c);
            row += &dg;
        }
        GateMode::Soft => {
            let logits = cosine_logits(f4, bank)?;
            let p = softmax(logits.as_slice().expect("contiguous"));
            // ĝ = Σ p_c g_c: direct path to each g_c, then through p
            let dp: Vec<f64> = bank.g.rows().into_iter().map(|gc| gc.dot(&dg)).collect();
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (c, mut row) in dbank.g.rows_mut().into_iter().enumerate() {
                row.scaled_add(p[c], &dg);
            }
            let dlogits = Array1::from_shape_fn(p.len(), |c| p[c] * (dp[c] - mean));
            df = cosine_logits_backward(f4, bank, &logits, &dlogits, dbank);
        }
    }
    Ok((dq, df))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank() -> PrototypeBank {
        PrototypeBank::from_rows(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]]).unwrap()
    }

    #[test]
    fn zero_and_ones_prototypes() {
        let q = array![0.5, -2.0, 3.0];
        assert_eq!(apply_gate(&q, &Array1::zeros(3)), q);
        let ones = PrototypeBank::from_rows(array![[1.0, 1.0, 1.0]]).unwrap();
        let u = prototype_gate(&q, array![0.1, 0.2, 0.3].view(), &ones, GateMode::Hard).unwrap();
        assert_eq!(u, &q * 2.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let b = PrototypeBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(hard_class(array![1.0, 1.0].view(), &b).unwrap(), 0);
    }

    #[test]
    fn hard_choice_is_scale_invariant() {
        let f = array![0.2, 0.9, -0.1];
        let a = hard_class(f.view(), &bank()).unwrap();
        let b = hard_class((&f * 37.5).view(), &bank()).unwrap();
        assert_eq!(a, b);
    }
}
