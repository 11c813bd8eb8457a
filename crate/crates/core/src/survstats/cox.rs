//! Cox proportional-hazards regression by Newton–Raphson on the Breslow
//! partial likelihood.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const MAX_ITER: usize = 50;
pub const SCORE_TOL: f64 = 1e-8;
const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateFit {
    pub name: String,
    pub coef: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalFit {
    pub covariates: Vec<CovariateFit>,
    pub log_likelihood: f64,
    pub n: usize,
    pub n_events: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl SurvivalFit {
    pub fn get(&self, name: &str) -> Option<&CovariateFit> {
        self.covariates.iter().find(|c| c.name == name)
    }
}

/// Two-sided Wald p-value of `z`.
pub fn wald_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

struct Eval {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

/// Log partial likelihood, score and observed information at `beta`.
/// `order` sorts subjects by descending time.
fn evaluate(x: &DMatrix<f64>, time: &[f64], event: &[bool], order: &[usize], beta: &DVector<f64>) -> Eval {
    let p = x.ncols();
    let eta = x * beta;
    let shift = eta.max();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut k = 0;
    while k < order.len() {
        let t = time[order[k]];
        let mut end = k;
        // the whole tied group enters the risk set before its events count
        while end < order.len() && time[order[end]] == t {
            let i = order[end];
            let w = (eta[i] - shift).exp();
            let xi = x.row(i).transpose();
            s0 += w;
            s1.axpy(w, &xi, 1.0);
            s2.ger(w, &xi, &xi, 1.0);
            end += 1;
        }
        let mean = &s1 / s0;
        let cov = &s2 / s0 - &mean * mean.transpose();
        for &i in &order[k..end] {
            if event[i] {
                loglik += eta[i] - shift - s0.ln();
                score += x.row(i).transpose() - &mean;
                info += &cov;
            }
        }
        k = end;
    }
    Eval { loglik, score, info }
}

/// Log partial likelihood (Breslow) of `beta`.
pub fn cox_log_likelihood(x: &DMatrix<f64>, time: &[f64], event: &[bool], beta: &[f64]) -> f64 {
    let order = descending(time);
    evaluate(x, time, event, &order, &DVector::from_column_slice(beta)).loglik
}

fn descending(time: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    order
}

/// Fits `h(t | x) = h0(t) exp(x·β)`.
///
/// Fails on shape problems, constant columns, no events, or a singular
/// information matrix. Running out of iterations is not an error; the fit is
/// returned with `converged = false`.
pub fn fit_cox(x: &DMatrix<f64>, time: &[f64], event: &[bool], names: &[String]) -> Result<SurvivalFit> {
    let (n, p) = x.shape();
    if time.len() != n || event.len() != n || names.len() != p {
        return Err(Error::Shape(format!("cox: {n}×{p} design with {} times, {} events, {} names", time.len(), event.len(), names.len())));
    }
    if p == 0 || n <= p {
        return Err(Error::Validation(format!("cox: need n > p ≥ 1, got n = {n}, p = {p}")));
    }
    if x.iter().chain(time).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cox: non-finite input".into()));
    }
    for j in 0..p {
        let c = x.column(j);
        if c.iter().all(|&v| v == c[0]) {
            return Err(Error::Validation(format!("cox: covariate '{}' is constant", names[j])));
        }
    }
    let n_events = event.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(Error::Undefined("cox: no events".into()));
    }

    // centring leaves β unchanged and keeps exp() well scaled
    let means = x.row_mean();
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let order = descending(time);
    let mut beta = DVector::zeros(p);
    let mut cur = evaluate(&xc, time, event, &order, &beta);
    let mut iterations = 0;
    let mut converged = cur.score.amax() <= SCORE_TOL;
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let chol = cur
            .info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("cox: information matrix is singular".into()))?;
        let step = chol.solve(&cur.score);
        let mut scale = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let e = evaluate(&xc, time, event, &order, &cand);
            if e.loglik.is_finite() && e.loglik >= cur.loglik - 1e-12 * cur.loglik.abs() {
                next = Some((cand, e));
                break;
            }
            scale *= 0.5;
        }
        let Some((b, e)) = next else { break };
        beta = b;
        cur = e;
        converged = cur.score.amax() <= SCORE_TOL;
    }
    let cov = cur
        .info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("cox: information matrix is singular".into()))?
        .inverse();
    let covariates = (0..p)
        .map(|j| {
            let coef = beta[j];
            let se = cov[(j, j)].sqrt();
            CovariateFit {
                name: names[j].clone(),
                coef,
                se,
                hazard_ratio: coef.exp(),
                ci_lower: (coef - Z_95 * se).exp(),
                ci_upper: (coef + Z_95 * se).exp(),
                p_value: wald_p(coef / se),
            }
        })
        .collect();
    Ok(SurvivalFit { covariates, log_likelihood: cur.loglik, n, n_events, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_designs() {
        let names = vec!["a".to_string()];
        let t = [1.0, 2.0, 3.0];
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]);
        assert!(matches!(fit_cox(&x, &t, &[true; 3], &names), Err(Error::Validation(_))));
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert!(matches!(fit_cox(&x, &t, &[false; 3], &names), Err(Error::Undefined(_))));
    }

    #[test]
    fn separated_data_does_not_converge_silently() {
        // risk ordering perfectly matches event order: the MLE diverges
        let names = vec!["a".to_string()];
        let t = [1.0, 2.0, 3.0, 4.0];
        let x = DMatrix::from_column_slice(4, 1, &[4.0, 3.0, 2.0, 1.0]);
        let fit = fit_cox(&x, &t, &[true; 4], &names);
        match fit {
            Ok(f) => assert!(!f.converged || f.covariates[0].coef > 5.0),
            Err(e) => assert!(e.is_numeric()),
        }
    }
}
