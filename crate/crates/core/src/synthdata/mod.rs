//! Synthetic cohort with known ground truth: fundus-like images whose planted
//! lesions grow with severity, tabular covariates, and exponential event times
//! driven by a known log-hazard.
//!
//! Every subject draws from its own counter-based stream keyed by
//! `(seed, subject index)`, so generation is deterministic under any
//! execution policy.

pub mod image;
pub mod manifest;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;
pub use image::{fundus_background, plant_lesions};
pub use manifest::{load_dataset, write_dataset};

/// Number of socio-demographic covariates ahead of the variant dosages.
pub const N_DEMOGRAPHIC: usize = 3;
pub const AGE_MEAN: f64 = 74.0;
pub const AGE_SD: f64 = 4.9;

/// Maps a 1–12 severity score to no (0), early (1), intermediate (2) or late (3).
pub fn group_severity(score: u8) -> Result<u8> {
    match score {
        1 => Ok(0),
        2..=5 => Ok(1),
        6..=9 => Ok(2),
        10..=12 => Ok(3),
        _ => Err(Error::Domain(format!("severity score {score} outside 1..=12"))),
    }
}

/// How severity scores become Stage-1 class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassScheme {
    /// no / early / intermediate / late
    #[default]
    Four,
    /// the raw 1–12 scale
    Twelve,
    /// late (10–12) versus everything else
    Two,
}

impl ClassScheme {
    pub fn n_classes(self) -> usize {
        match self {
            ClassScheme::Four => 4,
            ClassScheme::Twelve => 12,
            ClassScheme::Two => 2,
        }
    }

    pub fn label(self, score: u8) -> Result<usize> {
        let four = group_severity(score)? as usize;
        Ok(match self {
            ClassScheme::Four => four,
            ClassScheme::Twelve => score as usize - 1,
            ClassScheme::Two => usize::from(four == 3),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn as_str(self) -> &'static str {
        match self {
            Eye::Left => "left",
            Eye::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Eye> {
        match s {
            "left" => Some(Eye::Left),
            "right" => Some(Eye::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundusSample {
    /// `3 × H × W`, values in [0, 1]
    pub image: Array3<f64>,
    pub severity: u8,
    pub class_label: u8,
    pub subject_id: String,
    pub eye: Eye,
}

impl FundusSample {
    /// `subject_id` plus eye; unique within a bundle.
    pub fn sample_id(&self) -> String {
        format!("{}_{}", self.subject_id, self.eye.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// age_z, sex, smoking, then one dosage per variant
    pub covariates: Array1<f64>,
    pub event_time: f64,
    pub event: bool,
    /// ground truth, synthetic cohorts only (NaN when unknown)
    pub true_log_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub samples: Vec<FundusSample>,
    pub records: Vec<SubjectRecord>,
    pub n_variants: usize,
    pub manifest_path: Option<PathBuf>,
}

impl DatasetBundle {
    pub fn covariate_names(&self) -> Vec<String> {
        covariate_names(self.n_variants)
    }

    pub fn record_index(&self, subject_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.subject_id == subject_id)
    }

    /// Samples eligible for survival modelling: no late disease at baseline.
    pub fn base_visit_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].severity < 10).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: std::collections::HashSet<&str> = self.records.iter().map(|r| r.subject_id.as_str()).collect();
        if ids.len() != self.records.len() {
            return Err(Error::Validation("duplicate subject ids in records".into()));
        }
        for s in &self.samples {
            if !ids.contains(s.subject_id.as_str()) {
                return Err(Error::Validation(format!("sample of unknown subject '{}'", s.subject_id)));
            }
            if group_severity(s.severity)? != s.class_label {
                return Err(Error::Validation(format!(
                    "subject '{}': class label {} does not match severity {}",
                    s.subject_id, s.class_label, s.severity
                )));
            }
        }
        for r in &self.records {
            if r.covariates.len() != N_DEMOGRAPHIC + self.n_variants {
                return Err(Error::Validation(format!("subject '{}': wrong covariate count", r.subject_id)));
            }
            if !(r.event_time > 0.0 && r.event_time.is_finite()) {
                return Err(Error::Validation(format!("subject '{}': event time must be > 0", r.subject_id)));
            }
        }
        Ok(())
    }
}

pub fn covariate_names(n_variants: usize) -> Vec<String> {
    let mut names = vec!["age_z".to_string(), "sex".to_string(), "smoking".to_string()];
    names.extend((1..=n_variants).map(|i| format!("v{i:03}")));
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub image_size: usize,
    pub n_variants: usize,
    /// Lesion opacity and image share of the log-hazard, in [0, 1].
    pub lesion_signal: f64,
    /// Log-hazard weight per covariate (age_z, sex, smoking, variants...).
    /// Empty selects [`default_coefficients`].
    pub true_coefficients: Vec<f64>,
    pub baseline_rate: f64,
    pub censor_horizon: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 400,
            image_size: 32,
            n_variants: 52,
            lesion_signal: 1.0,
            true_coefficients: Vec::new(),
            baseline_rate: 0.05,
            censor_horizon: 12.0,
            seed: 42,
        }
    }
}

/// Moderate demographic effects plus a diffuse genetic signal: every variant
/// carries ±0.5, alternating in sign. No single variant dominates, so a
/// univariate screen recovers only part of the tabular risk.
pub fn default_coefficients(n_variants: usize) -> Vec<f64> {
    let mut c = vec![0.8, 0.2, 0.4];
    c.extend((0..n_variants).map(|j| if j % 2 == 0 { 0.5 } else { -0.5 }));
    c
}

impl SynthConfig {
    pub fn coefficients(&self) -> Vec<f64> {
        if self.true_coefficients.is_empty() {
            default_coefficients(self.n_variants)
        } else {
            self.true_coefficients.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("synth config: {m}")));
        if self.n_subjects < 2 {
            return bad("n_subjects must be >= 2");
        }
        if self.image_size < 16 {
            return bad("image_size must be >= 16");
        }
        if !(self.baseline_rate > 0.0) {
            return bad("baseline_rate must be > 0");
        }
        if !(self.censor_horizon > 0.0) {
            return bad("censor_horizon must be > 0");
        }
        if !(0.0..=1.0).contains(&self.lesion_signal) {
            return bad("lesion_signal must lie in [0, 1]");
        }
        if self.coefficients().len() != N_DEMOGRAPHIC + self.n_variants {
            return bad("true_coefficients must have 3 + n_variants entries");
        }
        Ok(())
    }
}

/// Independent stream for one (subject, purpose) pair.
pub fn subject_stream(seed: u64, subject: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 4) | purpose);
    rng
}

const STREAM_IMAGE: u64 = 0;
const STREAM_TABULAR: u64 = 1;
const STREAM_SURVIVAL: u64 = 2;
const STREAM_ALLELES: u64 = 3;

/// Exponential latent time with rate `baseline · exp(log_risk)`, uniform
/// censoring on `(0, horizon]`; returns `(min(T, U), T ≤ U)`.
pub fn sample_survival<R: Rng + ?Sized>(true_log_risk: f64, cfg: &SynthConfig, rng: &mut R) -> (f64, bool) {
    let rate = cfg.baseline_rate * true_log_risk.exp();
    let latent = Exp::new(rate).expect("positive rate").sample(rng).max(f64::MIN_POSITIVE);
    let censor = cfg.censor_horizon * (1.0 - rng.random::<f64>());
    if latent <= censor {
        (latent, true)
    } else {
        (censor, false)
    }
}

/// Closed-form `P(T ≤ U)` for the law used by [`sample_survival`].
pub fn event_probability(true_log_risk: f64, cfg: &SynthConfig) -> f64 {
    let lam = cfg.baseline_rate * true_log_risk.exp();
    let h = cfg.censor_horizon;
    1.0 - (1.0 - (-lam * h).exp()) / (lam * h)
}

/// Generates the cohort in memory (images already quantized to 8 bits).
pub fn generate_cohort(cfg: &SynthConfig, exec: Exec) -> Result<DatasetBundle> {
    cfg.validate()?;
    let coefs = cfg.coefficients();
    let nv = cfg.n_variants;
    let freqs: Vec<f64> = {
        let mut rng = subject_stream(cfg.seed, usize::MAX >> 8, STREAM_ALLELES);
        (0..nv).map(|_| rng.random_range(0.1..0.5)).collect()
    };
    let age = Normal::new(AGE_MEAN, AGE_SD).expect("valid normal");

    struct Draft {
        sample: FundusSample,
        age: f64,
        rest: Vec<f64>,
    }
    let drafts = exec.map_range(cfg.n_subjects, |i| {
        let subject_id = format!("S{:05}", i + 1);
        let mut img_rng = subject_stream(cfg.seed, i, STREAM_IMAGE);
        let class = img_rng.random_range(0..4u8);
        let severity = match class {
            0 => 1,
            1 => img_rng.random_range(2..=5),
            2 => img_rng.random_range(6..=9),
            _ => img_rng.random_range(10..=12),
        };
        let eye = if img_rng.random::<bool>() { Eye::Left } else { Eye::Right };
        let canvas = fundus_background(cfg.image_size, eye, &mut img_rng);
        let image = image::quantize(&plant_lesions(&canvas, severity, cfg.lesion_signal, &mut img_rng));

        let mut tab = subject_stream(cfg.seed, i, STREAM_TABULAR);
        let a = age.sample(&mut tab);
        let sex = f64::from(u8::from(tab.random::<f64>() < 1196.0 / 2741.0));
        let u: f64 = tab.random();
        let smoking = if u < 1287.0 / 2741.0 {
            0.0
        } else if u < (1287.0 + 1284.0) / 2741.0 {
            1.0
        } else {
            2.0
        };
        let mut rest = vec![sex, smoking];
        rest.extend(freqs.iter().map(|&f| Binomial::new(2, f).expect("valid binomial").sample(&mut tab) as f64));
        Draft {
            sample: FundusSample { image, severity, class_label: class, subject_id, eye },
            age: a,
            rest,
        }
    });

    let n = drafts.len() as f64;
    let mean = drafts.iter().map(|d| d.age).sum::<f64>() / n;
    let sd = (drafts.iter().map(|d| (d.age - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();

    let mut samples = Vec::with_capacity(drafts.len());
    let mut records = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.into_iter().enumerate() {
        let mut cov = Vec::with_capacity(N_DEMOGRAPHIC + nv);
        cov.push((d.age - mean) / sd);
        cov.extend(d.rest);
        let covariates = Array1::from_vec(cov);
        let tabular: f64 = covariates.iter().zip(&coefs).map(|(x, b)| x * b).sum();
        let true_log_risk = tabular + cfg.lesion_signal * f64::from(d.sample.severity - 1) / 11.0;
        let mut srng = subject_stream(cfg.seed, i, STREAM_SURVIVAL);
        let (event_time, event) = sample_survival(true_log_risk, cfg, &mut srng);
        records.push(SubjectRecord {
            subject_id: d.sample.subject_id.clone(),
            covariates,
            event_time,
            event,
            true_log_risk,
        });
        samples.push(d.sample);
    }
    Ok(DatasetBundle { samples, records, n_variants: nv, manifest_path: None })
}

/// Generates the cohort and writes manifest and images under `dir`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetBundle> {
    let mut bundle = generate_cohort(cfg, Exec::default())?;
    let path = write_dataset(&bundle, dir)?;
    bundle.manifest_path = Some(path);
    Ok(bundle)
}
