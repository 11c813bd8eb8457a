//! Univariate screen followed by one multivariate Cox fit, reported in the
//! order biomarker, severity score, socio-demographics, variants.

use nalgebra::DMatrix;
use serde::Serialize;

use super::cox::{fit_cox, CovariateFit, SurvivalFit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateGroup {
    Biomarker,
    Severity,
    Demographic,
    Variant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub group: CovariateGroup,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenRow {
    pub name: String,
    pub group: CovariateGroup,
    pub fit: Option<CovariateFit>,
    /// Why no fit is available (constant column, failed fit).
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiomarkerReport {
    pub alpha: f64,
    pub univariate: Vec<ScreenRow>,
    pub selected: Vec<String>,
    pub multivariate: Option<SurvivalFit>,
}

pub const SCREEN_ALPHA: f64 = 0.05;

/// Screens each covariate alone and refits the ones with `p < alpha` jointly.
pub fn biomarker_analysis(covariates: &[Covariate], time: &[f64], event: &[bool], alpha: f64) -> Result<BiomarkerReport> {
    let n = time.len();
    if let Some(c) = covariates.iter().find(|c| c.values.len() != n) {
        return Err(Error::Shape(format!("covariate '{}' has {} values for {n} subjects", c.name, c.values.len())));
    }
    let mut ordered: Vec<&Covariate> = covariates.iter().collect();
    ordered.sort_by_key(|c| c.group);

    let mut univariate = Vec::with_capacity(ordered.len());
    let mut selected = Vec::new();
    for c in &ordered {
        let row = if c.values.iter().all(|&v| v == c.values[0]) {
            ScreenRow { name: c.name.clone(), group: c.group, fit: None, note: Some("constant".into()) }
        } else {
            let x = DMatrix::from_column_slice(n, 1, &c.values);
            match fit_cox(&x, time, event, std::slice::from_ref(&c.name)) {
                Ok(f) if f.converged => {
                    ScreenRow { name: c.name.clone(), group: c.group, fit: Some(f.covariates[0].clone()), note: None }
                }
                Ok(_) => ScreenRow { name: c.name.clone(), group: c.group, fit: None, note: Some("did not converge".into()) },
                Err(e) if e.is_numeric() => {
                    ScreenRow { name: c.name.clone(), group: c.group, fit: None, note: Some(e.to_string()) }
                }
                Err(e) => return Err(e),
            }
        };
        if row.fit.as_ref().is_some_and(|f| f.p_value < alpha) {
            selected.push(c.name.clone());
        }
        univariate.push(row);
    }

    let multivariate = if selected.is_empty() {
        None
    } else {
        let cols: Vec<&Covariate> = ordered.iter().copied().filter(|c| selected.contains(&c.name)).collect();
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j].values[i]);
        Some(fit_cox(&x, time, event, &selected)?)
    };
    Ok(BiomarkerReport { alpha, univariate, selected, multivariate })
}

/// `2.77 (2.00~3.82)`.
pub fn format_hr(f: &CovariateFit) -> String {
    format!("{:.2} ({:.2}~{:.2})", f.hazard_ratio, f.ci_lower, f.ci_upper)
}

pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

impl BiomarkerReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("analysis,covariate,coef,se,hazard_ratio,ci_lower,ci_upper,p_value\n");
        let mut row = |analysis: &str, f: &CovariateFit| {
            out.push_str(&format!(
                "{analysis},{},{},{},{},{},{},{}\n",
                f.name, f.coef, f.se, f.hazard_ratio, f.ci_lower, f.ci_upper, f.p_value
            ));
        };
        for r in &self.univariate {
            if let Some(f) = &r.fit {
                row("univariate", f);
            }
        }
        if let Some(m) = &self.multivariate {
            for f in &m.covariates {
                row("multivariate", f);
            }
        }
        out
    }

    /// Aligned text table: one line per covariate, univariate columns then
    /// multivariate columns (blank when not selected).
    pub fn to_text(&self) -> String {
        let header = ["Covariate", "Univariate HR (95% CI)", "p", "Multivariate HR (95% CI)", "p"];
        let mut rows: Vec<[String; 5]> = Vec::new();
        for r in &self.univariate {
            let (uh, up) = match (&r.fit, &r.note) {
                (Some(f), _) => (format_hr(f), format_p(f.p_value)),
                (None, Some(n)) => (format!("({n})"), String::new()),
                (None, None) => (String::new(), String::new()),
            };
            let (mh, mp) = match self.multivariate.as_ref().and_then(|m| m.get(&r.name)) {
                Some(f) => (format_hr(f), format_p(f.p_value)),
                None => (String::new(), String::new()),
            };
            rows.push([r.name.clone(), uh, up, mh, mp]);
        }
        let mut width = header.map(|h| h.chars().count());
        for r in &rows {
            for k in 0..5 {
                width[k] = width[k].max(r[k].chars().count());
            }
        }
        let line = |cells: [&str; 5]| {
            let mut s = String::new();
            for k in 0..5 {
                let pad = width[k] - cells[k].chars().count();
                s.push_str(cells[k]);
                if k < 4 {
                    s.push_str(&" ".repeat(pad + 2));
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(header);
        for r in &rows {
            out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
        }
        if let Some(m) = &self.multivariate {
            out.push_str(&format!(
                "\nmultivariate: n = {}, events = {}, log-likelihood = {:.4}, converged = {}\n",
                m.n, m.n_events, m.log_likelihood, m.converged
            ));
        }
        out
    }
}
