//! Kaplan–Meier product-limit estimator and the two-group log-rank test.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Step function over the distinct observed times.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    /// `S(t)` just after each time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub censored: Vec<usize>,
}

impl KmCurve {
    /// Right-continuous evaluation; 1 before the first time.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Distinct times ascending with (at risk, events, censored) at each.
fn tabulate(time: &[f64], event: &[bool]) -> Vec<(f64, usize, usize, usize)> {
    let mut idx: Vec<usize> = (0..time.len()).collect();
    idx.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut rows = Vec::new();
    let mut remaining = time.len();
    let mut k = 0;
    while k < idx.len() {
        let t = time[idx[k]];
        let (mut d, mut c) = (0, 0);
        while k < idx.len() && time[idx[k]] == t {
            if event[idx[k]] {
                d += 1;
            } else {
                c += 1;
            }
            k += 1;
        }
        rows.push((t, remaining, d, c));
        remaining -= d + c;
    }
    rows
}

pub fn km_estimate(time: &[f64], event: &[bool]) -> Result<KmCurve> {
    if time.is_empty() {
        return Err(Error::Undefined("Kaplan–Meier needs at least one subject".into()));
    }
    if time.len() != event.len() {
        return Err(Error::Shape("time and event lengths differ".into()));
    }
    if time.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("times must be finite".into()));
    }
    let mut curve = KmCurve { times: vec![], survival: vec![], at_risk: vec![], events: vec![], censored: vec![] };
    let mut s = 1.0;
    for (t, n, d, c) in tabulate(time, event) {
        s *= 1.0 - d as f64 / n as f64;
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        curve.events.push(d);
        curve.censored.push(c);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    /// Observed minus expected events in group A.
    pub observed_minus_expected: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

pub fn logrank_test(time_a: &[f64], event_a: &[bool], time_b: &[f64], event_b: &[bool]) -> Result<LogRank> {
    if time_a.is_empty() || time_b.is_empty() {
        return Err(Error::Undefined("log-rank needs two non-empty groups".into()));
    }
    if time_a.len() != event_a.len() || time_b.len() != event_b.len() {
        return Err(Error::Shape("time and event lengths differ".into()));
    }
    let mut all: Vec<(f64, bool, bool)> = time_a.iter().zip(event_a).map(|(&t, &e)| (t, e, true)).collect();
    all.extend(time_b.iter().zip(event_b).map(|(&t, &e)| (t, e, false)));
    if all.iter().any(|r| !r.0.is_finite()) {
        return Err(Error::Numeric("times must be finite".into()));
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut n_a, mut n_b) = (time_a.len() as f64, time_b.len() as f64);
    let (mut o_minus_e, mut var, mut total_d) = (0.0, 0.0, 0usize);
    let mut k = 0;
    while k < all.len() {
        let t = all[k].0;
        let (mut d_a, mut d_b, mut leave_a, mut leave_b) = (0.0, 0.0, 0.0, 0.0);
        while k < all.len() && all[k].0 == t {
            let (_, e, in_a) = all[k];
            if in_a {
                leave_a += 1.0;
                d_a += f64::from(u8::from(e));
            } else {
                leave_b += 1.0;
                d_b += f64::from(u8::from(e));
            }
            k += 1;
        }
        let d = d_a + d_b;
        if d > 0.0 {
            let n = n_a + n_b;
            o_minus_e += d_a - d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
            total_d += d as usize;
        }
        n_a -= leave_a;
        n_b -= leave_b;
    }
    if total_d == 0 {
        return Err(Error::Undefined("log-rank test with zero events".into()));
    }
    if !(var > 0.0) {
        return Err(Error::Undefined("log-rank variance is zero".into()));
    }
    let statistic = o_minus_e * o_minus_e / var;
    Ok(LogRank { statistic, p_value: chi2_1_sf(statistic), observed_minus_expected: o_minus_e })
}

/// KM curves as CSV rows `time,survival,at_risk,group`, each group starting
/// with a `t = 0` row at survival 1.
pub fn km_csv(curves: &[(String, KmCurve)]) -> String {
    let mut out = String::from("time,survival,at_risk,group\n");
    for (name, c) in curves {
        let n0 = c.at_risk.first().copied().unwrap_or(0);
        out.push_str(&format!("0,1,{n0},{name}\n"));
        for k in 0..c.times.len() {
            out.push_str(&format!("{},{},{},{}\n", c.times[k], c.survival[k], c.at_risk[k], name));
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Static step-plot of one or more curves.
pub fn km_svg(title: &str, curves: &[(String, KmCurve)]) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let t_max = curves
        .iter()
        .flat_map(|(_, c)| c.times.last().copied())
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    let px = |t: f64| m + (w - 2.0 * m) * t / t_max;
    let py = |s: f64| h - m - (h - 2.0 * m) * s;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{m}\" y=\"20\">{}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\">time</text>\n<text x=\"4\" y=\"{m}\">S(t)</text>\n",
        escape(title),
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 8.0,
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut pts = format!("{:.2},{:.2}", px(0.0), py(1.0));
        let mut s = 1.0;
        for k in 0..c.times.len() {
            pts.push_str(&format!(" {:.2},{:.2}", px(c.times[k]), py(s)));
            s = c.survival[k];
            pts.push_str(&format!(" {:.2},{:.2}", px(c.times[k]), py(s)));
        }
        svg.push_str(&format!("<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{pts}\"/>\n"));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>\n",
            w - m - 110.0,
            m + 14.0 * (i as f64 + 1.0),
            escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
