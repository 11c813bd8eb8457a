//! Central finite-difference gradients, used as an independent oracle for
//! the hand-written backward passes.

use super::{flatten, load_flat, Params};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences of `loss` with respect to every entry of `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + step;
            let up = loss(&work);
            work[i] = x[i] - step;
            let down = loss(&work);
            work[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Central differences with respect to all parameters of `model`.
pub fn numeric_param_gradient<P: Params + Clone>(
    model: &P,
    step: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> Vec<f64> {
    let base = flatten(model);
    let mut probe = model.clone();
    numeric_gradient(&base, step, |x| {
        load_flat(&mut probe, x);
        loss(&probe)
    })
}

/// Worst relative error, `|a - n| / max(|a|, |n|, floor)` over all entries.
///
/// `floor` keeps entries that are both near zero from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
