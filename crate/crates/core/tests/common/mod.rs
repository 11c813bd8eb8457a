//! Brute-force reference implementations written straight from the
//! definitions, plus small random-instance generators.

#![allow(dead_code)]

use rand::Rng;

/// Harrell's C as (concordant half-units, comparable pairs) by pair enumeration.
pub fn c_index_pairs(risk: &[f64], time: &[f64], event: &[bool]) -> (u64, u64) {
    let (mut half, mut pairs) = (0, 0);
    for i in 0..risk.len() {
        for j in 0..risk.len() {
            if event[i] && time[i] < time[j] {
                pairs += 1;
                if risk[i] > risk[j] {
                    half += 2;
                } else if risk[i] == risk[j] {
                    half += 1;
                }
            }
        }
    }
    (half, pairs)
}

pub fn c_index(risk: &[f64], time: &[f64], event: &[bool]) -> Option<f64> {
    let (half, pairs) = c_index_pairs(risk, time, event);
    (pairs > 0).then(|| half as f64 / (2 * pairs) as f64)
}

/// Binary AUC at `horizon`: cases had the event by then, controls were
/// still under observation at it; everybody else is dropped.
pub fn horizon_auc(risk: &[f64], time: &[f64], event: &[bool], horizon: f64) -> Option<f64> {
    let case = |i: usize| event[i] && time[i] <= horizon;
    let control = |i: usize| !case(i) && time[i] >= horizon;
    let (mut half, mut pairs) = (0u64, 0u64);
    for i in (0..risk.len()).filter(|&i| case(i)) {
        for j in (0..risk.len()).filter(|&j| control(j)) {
            pairs += 1;
            half += if risk[i] > risk[j] { 2 } else if risk[i] == risk[j] { 1 } else { 0 };
        }
    }
    (pairs > 0).then(|| half as f64 / (2 * pairs) as f64)
}

fn distinct_sorted(time: &[f64]) -> Vec<f64> {
    let mut t = time.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Product-limit estimate just after each distinct time.
pub fn km(time: &[f64], event: &[bool]) -> Vec<(f64, f64)> {
    let mut s = 1.0;
    distinct_sorted(time)
        .into_iter()
        .map(|t| {
            let n = time.iter().filter(|&&x| x >= t).count();
            let d = (0..time.len()).filter(|&i| time[i] == t && event[i]).count();
            s *= 1.0 - d as f64 / n as f64;
            (t, s)
        })
        .collect()
}

/// Log-rank (observed − expected in group a, hypergeometric variance).
pub fn logrank(ta: &[f64], ea: &[bool], tb: &[f64], eb: &[bool]) -> (f64, f64) {
    let all: Vec<f64> = ta.iter().chain(tb).copied().collect();
    let (mut oe, mut var) = (0.0, 0.0);
    for t in distinct_sorted(&all) {
        let na = ta.iter().filter(|&&x| x >= t).count() as f64;
        let nb = tb.iter().filter(|&&x| x >= t).count() as f64;
        let da = (0..ta.len()).filter(|&i| ta[i] == t && ea[i]).count() as f64;
        let db = (0..tb.len()).filter(|&i| tb[i] == t && eb[i]).count() as f64;
        let (n, d) = (na + nb, da + db);
        if d > 0.0 {
            oe += da - d * na / n;
            if n > 1.0 {
                var += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
            }
        }
    }
    (oe, var)
}

/// Negative Breslow partial log-likelihood and its gradient, O(n²).
pub fn cox_nll(beta: &[f64], time: &[f64], event: &[bool]) -> (f64, Vec<f64>) {
    let n = beta.len();
    let mut value = 0.0;
    let mut grad: Vec<f64> = event.iter().map(|&e| -f64::from(u8::from(e))).collect();
    for i in (0..n).filter(|&i| event[i]) {
        let risk_set: Vec<usize> = (0..n).filter(|&j| time[j] >= time[i]).collect();
        let s: f64 = risk_set.iter().map(|&j| beta[j].exp()).sum();
        value -= beta[i] - s.ln();
        for &j in &risk_set {
            grad[j] += beta[j].exp() / s;
        }
    }
    (value, grad)
}

/// Times drawn from a small grid so that ties are common.
pub fn tied_times<R: Rng>(n: usize, levels: u32, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(1..=levels)) * 0.5).collect()
}

pub fn coin_flips<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

/// Risks on a coarse grid (ties) or continuous.
pub fn risks<R: Rng>(n: usize, coarse: bool, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| if coarse { f64::from(rng.random_range(0..4u8)) } else { rng.random_range(-3.0..3.0) })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub mod grad;
pub mod sweep;
pub mod scan;
pub mod checks;
pub mod freeze;
