//! Subject-level cross-validation, risk dichotomization and summary formatting.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::concordance::{concordance_index, time_dependent_auc};
use crate::error::{Error, Result};

/// Fold index per subject: events and non-events are shuffled separately
/// and dealt round-robin, so every fold gets a near-equal share of both.
pub fn stratified_folds(event: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || event.len() < k {
        return Err(Error::Validation(format!("cannot make {k} folds from {} subjects", event.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev: Vec<usize> = (0..event.len()).filter(|&i| event[i]).collect();
    let mut ne: Vec<usize> = (0..event.len()).filter(|&i| !event[i]).collect();
    ev.shuffle(&mut rng);
    ne.shuffle(&mut rng);
    let mut fold = vec![0; event.len()];
    for (pos, &i) in ev.iter().chain(&ne).enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_splits(assignment: &[usize], k: usize) -> Vec<FoldSplit> {
    (0..k)
        .map(|f| FoldSplit {
            fold: f,
            train: (0..assignment.len()).filter(|&i| assignment[i] != f).collect(),
            test: (0..assignment.len()).filter(|&i| assignment[i] == f).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    High,
}

pub fn median(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Undefined("median of an empty set".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

/// Labels `eval` against the median of `train`; `β ≥ median` is high risk.
pub fn dichotomize_risk(train: &[f64], eval: &[f64]) -> Result<(f64, Vec<RiskGroup>)> {
    let m = median(train)?;
    Ok((m, eval.iter().map(|&b| if b >= m { RiskGroup::High } else { RiskGroup::Low }).collect()))
}

/// Mean and sample standard deviation, shown as `0.8873 ± 0.0093`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanSd { mean, sd, n: v.len() })
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub test_events: usize,
    /// `None` when the test fold has no comparable pair.
    pub c_index: Option<f64>,
    /// `None` when the test fold lacks a positive or a negative at the horizon.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskRow {
    pub subject: usize,
    pub beta: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldMetrics>,
    pub c_index: Option<MeanSd>,
    pub auc: Option<MeanSd>,
    /// C-index over all held-out predictions pooled.
    pub pooled_c_index: Option<f64>,
    /// Held-out risk of every subject, in subject order.
    pub risks: Vec<RiskRow>,
}

/// Runs `fit` on each fold. `fit` trains on `split.train` and returns one
/// held-out log-risk per entry of `split.test`.
pub fn cross_validate<F>(
    time: &[f64],
    event: &[bool],
    k: usize,
    seed: u64,
    horizon: f64,
    fit: F,
) -> Result<CvReport>
where
    F: FnMut(&FoldSplit) -> Result<Vec<f64>>,
{
    if time.len() != event.len() {
        return Err(Error::Shape("time and event lengths differ".into()));
    }
    let assignment = stratified_folds(event, k, seed)?;
    cross_validate_assigned(time, event, &assignment, k, horizon, fit)
}

/// [`cross_validate`] with a precomputed fold index per unit (for example
/// when several units share one subject and must stay in the same fold).
pub fn cross_validate_assigned<F>(
    time: &[f64],
    event: &[bool],
    assignment: &[usize],
    k: usize,
    horizon: f64,
    mut fit: F,
) -> Result<CvReport>
where
    F: FnMut(&FoldSplit) -> Result<Vec<f64>>,
{
    if time.len() != event.len() || assignment.len() != time.len() {
        return Err(Error::Shape("time, event and fold assignment lengths differ".into()));
    }
    if let Some(&bad) = assignment.iter().find(|&&f| f >= k) {
        return Err(Error::Validation(format!("fold index {bad} out of range for k = {k}")));
    }
    let mut folds = Vec::with_capacity(k);
    let mut risks: Vec<Option<RiskRow>> = vec![None; time.len()];
    for split in fold_splits(assignment, k) {
        if !split.train.iter().any(|&i| event[i]) {
            return Err(Error::Validation(format!("fold {}: training part has zero events", split.fold)));
        }
        let beta = fit(&split)?;
        if beta.len() != split.test.len() {
            return Err(Error::Shape(format!(
                "fold {}: {} risks for {} test subjects",
                split.fold,
                beta.len(),
                split.test.len()
            )));
        }
        let sub = |v: &[f64]| split.test.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let (t, e): (Vec<f64>, Vec<bool>) = (sub(time), split.test.iter().map(|&i| event[i]).collect());
        folds.push(FoldMetrics {
            fold: split.fold,
            n_train: split.train.len(),
            n_test: split.test.len(),
            test_events: e.iter().filter(|&&x| x).count(),
            c_index: concordance_index(&beta, &t, &e).ok(),
            auc: time_dependent_auc(&beta, &t, &e, horizon).ok(),
        });
        for (&i, &b) in split.test.iter().zip(&beta) {
            risks[i] = Some(RiskRow { subject: i, beta: b, fold: split.fold });
        }
    }
    let risks: Vec<RiskRow> = risks.into_iter().map(|r| r.expect("folds partition subjects")).collect();
    let beta: Vec<f64> = risks.iter().map(|r| r.beta).collect();
    let cs: Vec<f64> = folds.iter().filter_map(|f| f.c_index).collect();
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
    Ok(CvReport {
        c_index: MeanSd::of(&cs),
        auc: MeanSd::of(&aucs),
        pooled_c_index: concordance_index(&beta, time, event).ok(),
        folds,
        risks,
    })
}
