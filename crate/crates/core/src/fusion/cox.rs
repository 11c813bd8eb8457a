//! Negative Cox partial log-likelihood with Breslow ties, in `O(n log n)`.

use crate::error::{Error, Result};
use crate::nn::act::log_sum_exp;

#[derive(Debug, Clone, PartialEq)]
pub struct CoxLoss {
    /// `-Σ_{i:δ_i=1} (β_i - log Σ_{j: t_j ≥ t_i} exp β_j)`.
    pub value: f64,
    /// `∂ value / ∂ β`.
    pub grad: Vec<f64>,
    pub n_events: usize,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Returns `Ok(None)` when the batch has no events (skip it), an error on
/// shape or finiteness problems.
pub fn cox_loss(beta: &[f64], time: &[f64], event: &[bool]) -> Result<Option<CoxLoss>> {
    let n = beta.len();
    if time.len() != n || event.len() != n {
        return Err(Error::Shape(format!("cox loss: {n} risks, {} times, {} events", time.len(), event.len())));
    }
    if n < 2 {
        return Err(Error::Validation("cox loss needs at least two subjects".into()));
    }
    if beta.iter().chain(time).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cox loss: non-finite risk or time".into()));
    }
    let n_events = event.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Ok(None);
    }
    // centred on the largest risk: a representable common shift leaves
    // every later operation bit-identical
    let top = beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let centred: Vec<f64> = beta.iter().map(|b| b - top).collect();
    let beta = centred.as_slice();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    // group boundaries over ascending time
    let mut groups = Vec::new();
    let mut k = 0;
    while k < n {
        let mut end = k;
        while end < n && time[order[end]] == time[order[k]] {
            end += 1;
        }
        groups.push((k, end));
        k = end;
    }

    // log Σ exp β over the risk set of each group, built from the latest time
    let mut lse = vec![0.0; groups.len()];
    let mut acc = f64::NEG_INFINITY;
    for (g, &(s, e)) in groups.iter().enumerate().rev() {
        let part: Vec<f64> = order[s..e].iter().map(|&i| beta[i]).collect();
        acc = log_add(acc, log_sum_exp(&part));
        lse[g] = acc;
    }

    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    // log Σ_{events i with t_i ≤ t} exp(-lse_i), built from the earliest time
    let mut inv = f64::NEG_INFINITY;
    for (g, &(s, e)) in groups.iter().enumerate() {
        for &i in &order[s..e] {
            if event[i] {
                value += lse[g] - beta[i];
                inv = log_add(inv, -lse[g]);
            }
        }
        for &j in &order[s..e] {
            grad[j] = (beta[j] + inv).exp() - f64::from(u8::from(event[j]));
        }
    }
    Ok(Some(CoxLoss { value, grad, n_events }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_subject_example() {
        let l = cox_loss(&[0.0, 0.0], &[1.0, 2.0], &[true, false]).unwrap().unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.n_events, 1);
    }

    #[test]
    fn no_events_is_a_skip_signal() {
        assert!(cox_loss(&[0.1, 0.2], &[1.0, 2.0], &[false, false]).unwrap().is_none());
        assert!(cox_loss(&[0.1], &[1.0], &[true]).is_err());
    }

    #[test]
    fn shift_invariance_is_exact_for_representable_shifts() {
        let b = [0.25, -1.5, 2.0, 0.5];
        let t = [3.0, 1.0, 2.0, 2.0];
        let e = [true, true, false, true];
        let l0 = cox_loss(&b, &t, &e).unwrap().unwrap().value;
        let shifted: Vec<f64> = b.iter().map(|x| x + 8.0).collect();
        let l1 = cox_loss(&shifted, &t, &e).unwrap().unwrap().value;
        assert_eq!(l0, l1);
    }

    #[test]
    fn extreme_risks_stay_finite() {
        let l = cox_loss(&[800.0, -800.0, 0.0], &[1.0, 2.0, 3.0], &[true, true, true]).unwrap().unwrap();
        assert!(l.value.is_finite() && l.grad.iter().all(|g| g.is_finite()));
    }
}
