//! Harrell's C-index and the binary horizon AUC.
//!
//! Both are computed with sort-based counting in half-unit integers, so the
//! results are exact rationals independent of summation order.

use crate::error::{Error, Result};

fn check_inputs(risk: &[f64], time: &[f64], event: &[bool]) -> Result<()> {
    if risk.len() != time.len() || risk.len() != event.len() {
        return Err(Error::Shape(format!(
            "risk/time/event lengths differ: {}/{}/{}",
            risk.len(),
            time.len(),
            event.len()
        )));
    }
    if risk.iter().chain(time).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("risk and time must be finite".into()));
    }
    Ok(())
}

/// Dense 0-based ranks of `v` (equal values share a rank).
fn dense_ranks(v: &[f64]) -> (Vec<usize>, usize) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0; v.len()];
    let mut r = 0;
    for k in 0..idx.len() {
        if k > 0 && v[idx[k]] != v[idx[k - 1]] {
            r += 1;
        }
        ranks[idx[k]] = r;
    }
    (ranks, if v.is_empty() { 0 } else { r + 1 })
}

/// Fenwick tree of counts.
struct Counts {
    tree: Vec<u64>,
}

impl Counts {
    fn new(n: usize) -> Self {
        Counts { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += 1;
            k += k & k.wrapping_neg();
        }
    }

    /// Number of inserted values with index `< i`.
    fn below(&self, i: usize) -> u64 {
        let mut k = i;
        let mut s = 0;
        while k > 0 {
            s += self.tree[k];
            k -= k & k.wrapping_neg();
        }
        s
    }
}

/// Concordant mass in half units and the number of comparable pairs.
pub fn concordance_counts(risk: &[f64], time: &[f64], event: &[bool]) -> Result<(u64, u64)> {
    check_inputs(risk, time, event)?;
    let (ranks, n_ranks) = dense_ranks(risk);
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let mut seen = Counts::new(n_ranks);
    let mut inserted = 0u64;
    let (mut half, mut pairs) = (0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end < order.len() && time[order[end]] == time[order[k]] {
            end += 1;
        }
        // everything in `seen` has a strictly later time than this group
        for &i in &order[k..end] {
            if event[i] {
                let less = seen.below(ranks[i]);
                let equal = seen.below(ranks[i] + 1) - less;
                half += 2 * less + equal;
                pairs += inserted;
            }
        }
        for &i in &order[k..end] {
            seen.add(ranks[i]);
            inserted += 1;
        }
        k = end;
    }
    Ok((half, pairs))
}

/// Harrell's C: pairs with `t_i < t_j` and `δ_i = 1` are comparable; the
/// pair is concordant when `risk_i > risk_j`, and counts one half on a tie.
pub fn concordance_index(risk: &[f64], time: &[f64], event: &[bool]) -> Result<f64> {
    if risk.len() < 2 {
        return Err(Error::Undefined("C-index needs at least two subjects".into()));
    }
    let (half, pairs) = concordance_counts(risk, time, event)?;
    if pairs == 0 {
        return Err(Error::Undefined("no comparable pairs for the C-index".into()));
    }
    Ok(half as f64 / (2 * pairs) as f64)
}

/// Horizon status: `Some(true)` for an event at or before the horizon,
/// `Some(false)` for anyone still event-free at the horizon, `None` for
/// subjects censored before it.
pub fn horizon_status(time: f64, event: bool, horizon: f64) -> Option<bool> {
    if event && time <= horizon {
        Some(true)
    } else if time > horizon || time == horizon {
        Some(false)
    } else {
        None
    }
}

/// Binary AUC of `risk` for event-by-`horizon` status, ties counted 1/2.
pub fn time_dependent_auc(risk: &[f64], time: &[f64], event: &[bool], horizon: f64) -> Result<f64> {
    check_inputs(risk, time, event)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..risk.len() {
        match horizon_status(time[i], event[i], horizon) {
            Some(true) => pos.push(risk[i]),
            Some(false) => neg.push(risk[i]),
            None => {}
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Undefined(format!(
            "horizon AUC at {horizon} needs both classes ({} positives, {} negatives)",
            pos.len(),
            neg.len()
        )));
    }
    neg.sort_by(f64::total_cmp);
    let mut half = 0u64;
    for &r in &pos {
        let less = neg.partition_point(|&v| v < r) as u64;
        let not_greater = neg.partition_point(|&v| v <= r) as u64;
        half += 2 * less + (not_greater - less);
    }
    Ok(half as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64)
}
