//! End-to-end runs: per-fold Stage 1 and Stage 2, the ablation grid and the
//! inputs of the biomarker analysis.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::{extract_features, train_stage2, FusionConfig, FusionMode, FusionModel, GateMode, Stage2EpochLog, SurvivalSet};
use crate::parallel::Exec;
use crate::pretrain::{train_stage1, EpochLog, Stage1Config, Stage1Model};
use crate::survstats::biomarker::{Covariate, CovariateGroup};
use crate::survstats::cv::{cross_validate_assigned, fold_splits, median, stratified_folds, FoldSplit, RiskGroup};
use crate::survstats::{concordance_index, CvReport, MeanSd};
use crate::synthdata::{ClassScheme, DatasetBundle, FundusSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub stage1: Stage1Config,
    pub fusion: FusionConfig,
    /// Share of each training fold held back to select the Stage-2 epoch.
    pub val_fraction: f64,
    pub k: usize,
    pub horizon: f64,
    /// Seeds fold assignment, inner splits and both training stages.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backbone: BackboneConfig::default(),
            stage1: Stage1Config::desk(),
            fusion: FusionConfig::desk(),
            val_fraction: 0.2,
            k: 5,
            horizon: 5.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.stage1.validate()?;
        self.fusion.validate(self.backbone.embed_dim())?;
        if !(0.0..0.9).contains(&self.val_fraction) {
            return Err(Error::Validation("val_fraction must lie in [0, 0.9)".into()));
        }
        if self.k < 2 {
            return Err(Error::Validation("k must be at least 2".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Validation("horizon must be > 0".into()));
        }
        Ok(())
    }

    /// Copy with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.stage1.seed = seed;
        c.fusion.seed = seed;
        c
    }
}

/// Survival units: samples without late disease, with their subject rows.
#[derive(Debug, Clone)]
pub struct Units {
    /// Sample index of each unit.
    pub samples: Vec<usize>,
    /// Record index of each unit.
    pub records: Vec<usize>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
}

impl Units {
    pub fn new(bundle: &DatasetBundle) -> Result<Self> {
        let index: HashMap<&str, usize> =
            bundle.records.iter().enumerate().map(|(i, r)| (r.subject_id.as_str(), i)).collect();
        let samples = bundle.base_visit_indices();
        let records: Vec<usize> = samples
            .iter()
            .map(|&s| {
                index
                    .get(bundle.samples[s].subject_id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("sample {} has no subject record", bundle.samples[s].sample_id())))
            })
            .collect::<Result<_>>()?;
        Ok(Units {
            time: records.iter().map(|&r| bundle.records[r].event_time).collect(),
            event: records.iter().map(|&r| bundle.records[r].event).collect(),
            samples,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fold per unit, assigned per subject (stratified by event) so that
    /// units of one subject never straddle folds.
    pub fn fold_assignment(&self, k: usize, seed: u64) -> Result<Vec<usize>> {
        let mut subjects: Vec<usize> = self.records.clone();
        subjects.sort_unstable();
        subjects.dedup();
        let first_unit: HashMap<usize, usize> = self.records.iter().enumerate().rev().map(|(u, &r)| (r, u)).collect();
        let ev: Vec<bool> = subjects.iter().map(|r| self.event[first_unit[r]]).collect();
        let folds = stratified_folds(&ev, k, seed)?;
        let by_subject: HashMap<usize, usize> = subjects.iter().copied().zip(folds).collect();
        Ok(self.records.iter().map(|r| by_subject[r]).collect())
    }
}

/// Event-stratified random split of `idx` into (fit, validation).
pub fn inner_split(idx: &[usize], event: &[bool], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 {
        return (idx.to_vec(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_1A7E);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for flag in [true, false] {
        let mut part: Vec<usize> = idx.iter().copied().filter(|&i| event[i] == flag).collect();
        part.shuffle(&mut rng);
        let n_val = (part.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&part[..n_val]);
        fit.extend_from_slice(&part[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

/// Samples used to pretrain for a fold: everything except test subjects.
pub fn stage1_samples<'a>(bundle: &'a DatasetBundle, units: &Units, test: &[usize]) -> Vec<&'a FundusSample> {
    let held: std::collections::HashSet<&str> =
        test.iter().map(|&u| bundle.records[units.records[u]].subject_id.as_str()).collect();
    bundle.samples.iter().filter(|s| !held.contains(s.subject_id.as_str())).collect()
}

/// Frozen-backbone features of every unit.
pub fn unit_features(bundle: &DatasetBundle, units: &Units, stage1: &Stage1Model, exec: Exec) -> Result<SurvivalSet> {
    let idx: Vec<usize> = (0..units.len()).collect();
    let features = exec
        .map(&idx, |&u| {
            extract_features(stage1, &bundle.samples[units.samples[u]].image, &bundle.records[units.records[u]].covariates)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SurvivalSet { features, time: units.time.clone(), event: units.event.clone() })
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub stage1_log: Vec<EpochLog>,
    pub stage2_log: Vec<Stage2EpochLog>,
    pub stage2_selected_epoch: usize,
    pub model: FusionModel,
    /// Risks of `split.train` then `split.test`, in split order.
    pub train_risk: Vec<f64>,
    pub test_risk: Vec<f64>,
}

/// Stage 2 on prepared features for one split.
pub fn fit_stage2(
    set: &SurvivalSet,
    split: &FoldSplit,
    stage1: &Stage1Model,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<(FusionModel, Vec<Stage2EpochLog>, usize)> {
    let (fit_idx, val_idx) = inner_split(&split.train, &set.event, cfg.val_fraction, cfg.seed.wrapping_add(split.fold as u64));
    let fit = set.subset(&fit_idx);
    let val = set.subset(&val_idx);
    let bank = (cfg.fusion.gate_mode != GateMode::None).then_some(&stage1.bank);
    let r = train_stage2(&fit, (!val.is_empty()).then_some(&val), bank, &cfg.fusion, exec)?;
    Ok((r.model, r.log, r.selected_epoch))
}

/// Full two-stage run for one fold.
pub fn run_fold(bundle: &DatasetBundle, units: &Units, split: &FoldSplit, cfg: &PipelineConfig, exec: Exec) -> Result<(Stage1Model, FoldRun)> {
    let s1 = train_stage1(&stage1_samples(bundle, units, &split.test), None, &cfg.backbone, &cfg.stage1, exec, None)?;
    let set = unit_features(bundle, units, &s1.model, exec)?;
    let (model, log, selected) = fit_stage2(&set, split, &s1.model, cfg, exec)?;
    let train_risk = model.risks(&set.subset(&split.train).features, exec)?;
    let test_risk = model.risks(&set.subset(&split.test).features, exec)?;
    Ok((
        s1.model,
        FoldRun {
            fold: split.fold,
            stage1_log: s1.log,
            stage2_log: log,
            stage2_selected_epoch: selected,
            model,
            train_risk,
            test_risk,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub subject_id: String,
    pub beta: f64,
    pub fold: usize,
    pub split: String,
}

pub fn risk_rows(bundle: &DatasetBundle, units: &Units, split: &FoldSplit, run: &FoldRun) -> Vec<RiskRow> {
    let row = |u: usize, beta: f64, s: &str| RiskRow {
        subject_id: bundle.records[units.records[u]].subject_id.clone(),
        beta,
        fold: split.fold,
        split: s.to_string(),
    };
    split
        .train
        .iter()
        .zip(&run.train_risk)
        .map(|(&u, &b)| row(u, b, "train"))
        .chain(split.test.iter().zip(&run.test_risk).map(|(&u, &b)| row(u, b, "test")))
        .collect()
}

pub fn write_risk_table(rows: &[RiskRow], path: &std::path::Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_risk_table(path: &std::path::Path) -> Result<Vec<RiskRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Validation(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

/// Cross-validated two-stage run.
pub struct CvRun {
    pub report: CvReport,
    pub rows: Vec<RiskRow>,
    pub folds: Vec<FoldRun>,
}

pub fn run_cv(bundle: &DatasetBundle, cfg: &PipelineConfig, only_fold: Option<usize>, exec: Exec) -> Result<CvRun> {
    cfg.validate()?;
    let units = Units::new(bundle)?;
    let assignment = units.fold_assignment(cfg.k, cfg.seed)?;
    if let Some(f) = only_fold {
        if f >= cfg.k {
            return Err(Error::Validation(format!("fold {f} out of range for k = {}", cfg.k)));
        }
    }
    let mut rows = Vec::new();
    let mut folds = Vec::new();
    let mut report = cross_validate_assigned(&units.time, &units.event, &assignment, cfg.k, cfg.horizon, |split| {
        if only_fold.is_some_and(|f| f != split.fold) {
            return Ok(vec![f64::NAN; split.test.len()]);
        }
        let (_, run) = run_fold(bundle, &units, split, cfg, exec)?;
        rows.extend(risk_rows(bundle, &units, split, &run));
        let risk = run.test_risk.clone();
        folds.push(run);
        Ok(risk)
    })?;
    if let Some(f) = only_fold {
        report.folds.retain(|m| m.fold == f);
        report.risks.retain(|r| r.fold == f);
        let cs: Vec<f64> = report.folds.iter().filter_map(|m| m.c_index).collect();
        let aucs: Vec<f64> = report.folds.iter().filter_map(|m| m.auc).collect();
        report.c_index = MeanSd::of(&cs);
        report.auc = MeanSd::of(&aucs);
        let (b, t, e): (Vec<f64>, Vec<f64>, Vec<bool>) = report
            .risks
            .iter()
            .map(|r| (r.beta, units.time[r.subject], units.event[r.subject]))
            .fold((vec![], vec![], vec![]), |mut acc, (b, t, e)| {
                acc.0.push(b);
                acc.1.push(t);
                acc.2.push(e);
                acc
            });
        report.pooled_c_index = concordance_index(&b, &t, &e).ok();
    }
    Ok(CvRun { report, rows, folds })
}

/// Table-2 model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
    M5,
    M7,
    M8,
}

impl ModelId {
    pub const ALL: [ModelId; 7] = [ModelId::M1, ModelId::M2, ModelId::M3, ModelId::M4, ModelId::M5, ModelId::M7, ModelId::M8];

    pub fn fusion(self) -> FusionMode {
        match self {
            ModelId::M1 => FusionMode::None,
            ModelId::M2 => FusionMode::Concat,
            _ => FusionMode::MultiscaleAttention,
        }
    }

    pub fn gate(self) -> GateMode {
        match self {
            ModelId::M1 | ModelId::M2 | ModelId::M3 => GateMode::None,
            ModelId::M5 => GateMode::Soft,
            _ => GateMode::Hard,
        }
    }

    pub fn classes(self) -> ClassScheme {
        match self {
            ModelId::M7 => ClassScheme::Twelve,
            ModelId::M8 => ClassScheme::Two,
            _ => ClassScheme::Four,
        }
    }

    pub fn fusion_label(self) -> &'static str {
        match self.fusion() {
            FusionMode::None => "-",
            FusionMode::Concat => "Concat Fusion",
            FusionMode::MultiscaleAttention => "multi-scale attention",
        }
    }

    pub fn gate_label(self) -> &'static str {
        match self {
            ModelId::M1 | ModelId::M2 | ModelId::M3 => "-",
            ModelId::M4 => "hard label",
            ModelId::M5 => "soft label",
            ModelId::M7 => "12c hard label",
            ModelId::M8 => "2c hard label",
        }
    }

    pub fn parse(s: &str) -> Option<ModelId> {
        ModelId::ALL.into_iter().find(|m| m.to_string().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub models: Vec<ModelId>,
    pub seeds: Vec<u64>,
    /// Folds evaluated per seed (1 = only the first fold of a k-fold split).
    pub folds_per_seed: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { models: ModelId::ALL.to_vec(), seeds: vec![0, 1, 2, 3, 4], folds_per_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub model: ModelId,
    pub backbone: String,
    pub fusion: String,
    pub label: String,
    /// Held-out C-index per seed (mean over the evaluated folds).
    pub per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
    pub summary: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, m: ModelId) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == m)
    }

    /// Mean over seeds of `C(a) - C(b)`.
    pub fn mean_paired_difference(&self, a: ModelId, b: ModelId) -> Option<f64> {
        let (ra, rb) = (self.row(a)?, self.row(b)?);
        let d: Vec<f64> = ra.per_seed.iter().zip(&rb.per_seed).map(|(x, y)| x - y).collect();
        MeanSd::of(&d).map(|m| m.mean)
    }

    /// Row-per-model table: Models, Backbone, Fusion, Label, C-index, Seeds.
    pub fn to_text(&self) -> String {
        let header = ["Models", "Backbone", "Fusion", "Label", "C-index", "Seeds"];
        let rows: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
                [r.model.to_string(), r.backbone.clone(), r.fusion.clone(), r.label.clone(), r.summary.to_string(), seeds.join(",")]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for r in &rows {
            for k in 0..6 {
                width[k] = width[k].max(r[k].chars().count());
            }
        }
        let fmt_row = |cells: Vec<&str>| {
            let mut s = String::new();
            for (k, c) in cells.iter().enumerate() {
                s.push_str(c);
                if k < 5 {
                    s.push_str(&" ".repeat(width[k] - c.chars().count() + 2));
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = fmt_row(header.to_vec());
        for r in &rows {
            out.push_str(&fmt_row(r.iter().map(String::as_str).collect()));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,backbone,fusion,label,c_index_mean,c_index_sd,c_index,seeds,per_seed\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let per: Vec<String> = r.per_seed.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.model,
                r.backbone,
                r.fusion,
                r.label,
                r.summary.mean,
                r.summary.sd,
                r.summary,
                seeds.join(";"),
                per.join(";")
            ));
        }
        out
    }
}

/// Runs every model for every seed. Stage 1 is trained once per
/// (seed, fold, class scheme) and shared by the models that use it.
pub fn run_ablation(bundle: &DatasetBundle, base: &PipelineConfig, abl: &AblationConfig, exec: Exec) -> Result<AblationReport> {
    base.validate()?;
    if abl.models.is_empty() || abl.seeds.is_empty() || abl.folds_per_seed == 0 {
        return Err(Error::Validation("ablation needs at least one model, seed and fold".into()));
    }
    let units = Units::new(bundle)?;
    let mut per_model: HashMap<ModelId, Vec<f64>> = HashMap::new();
    for &seed in &abl.seeds {
        let cfg = base.with_seed(seed);
        let assignment = units.fold_assignment(cfg.k, seed)?;
        let splits = fold_splits(&assignment, cfg.k);
        let mut fold_scores: HashMap<ModelId, Vec<f64>> = HashMap::new();
        for split in splits.iter().take(abl.folds_per_seed.min(cfg.k)) {
            let mut cache: HashMap<ClassScheme, (Stage1Model, SurvivalSet)> = HashMap::new();
            for &m in &abl.models {
                let scheme = m.classes();
                if !cache.contains_key(&scheme) {
                    let s1cfg = Stage1Config { classes: scheme, ..cfg.stage1.clone() };
                    let s1 = train_stage1(&stage1_samples(bundle, &units, &split.test), None, &cfg.backbone, &s1cfg, exec, None)?;
                    let set = unit_features(bundle, &units, &s1.model, exec)?;
                    cache.insert(scheme, (s1.model, set));
                }
                let (stage1, set) = &cache[&scheme];
                let mcfg = PipelineConfig {
                    fusion: FusionConfig { fusion_mode: m.fusion(), gate_mode: m.gate(), ..cfg.fusion.clone() },
                    ..cfg.clone()
                };
                let (model, _, _) = fit_stage2(set, split, stage1, &mcfg, exec)?;
                let test = set.subset(&split.test);
                let risk = model.risks(&test.features, exec)?;
                let c = concordance_index(&risk, &test.time, &test.event)?;
                fold_scores.entry(m).or_default().push(c);
            }
        }
        for (m, v) in fold_scores {
            per_model.entry(m).or_default().push(v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    let rows = abl
        .models
        .iter()
        .map(|&m| {
            let per_seed = per_model.remove(&m).unwrap_or_default();
            AblationRow {
                model: m,
                backbone: "Mamba".into(),
                fusion: m.fusion_label().into(),
                label: m.gate_label().into(),
                summary: MeanSd::of(&per_seed).expect("one score per seed"),
                per_seed,
                seeds: abl.seeds.clone(),
            }
        })
        .collect();
    Ok(AblationReport { rows })
}

/// Held-out risk groups: each test unit is labelled against the median of
/// its own fold's training risks.
pub fn held_out_groups(rows: &[RiskRow]) -> Result<HashMap<String, RiskGroup>> {
    let mut by_fold: HashMap<usize, (Vec<f64>, Vec<&RiskRow>)> = HashMap::new();
    for r in rows {
        let e = by_fold.entry(r.fold).or_default();
        match r.split.as_str() {
            "train" => e.0.push(r.beta),
            "test" => e.1.push(r),
            other => return Err(Error::Validation(format!("risk table: unknown split '{other}'"))),
        }
    }
    let mut out = HashMap::new();
    for (fold, (train, test)) in by_fold {
        if test.is_empty() {
            continue;
        }
        let m = median(&train).map_err(|_| Error::Validation(format!("risk table: fold {fold} has no training rows")))?;
        for r in test {
            out.insert(r.subject_id.clone(), if r.beta >= m { RiskGroup::High } else { RiskGroup::Low });
        }
    }
    Ok(out)
}

/// Covariates for the biomarker report over the units in `groups`, in
/// record order: risk group, severity score, demographics, variants.
pub fn biomarker_inputs(
    bundle: &DatasetBundle,
    groups: &HashMap<String, RiskGroup>,
) -> Result<(Vec<Covariate>, Vec<f64>, Vec<bool>, Vec<usize>)> {
    let units = Units::new(bundle)?;
    let keep: Vec<usize> = (0..units.len())
        .filter(|&u| groups.contains_key(&bundle.records[units.records[u]].subject_id))
        .collect();
    if keep.is_empty() {
        return Err(Error::Validation("no held-out subjects match the dataset".into()));
    }
    let rec = |u: usize| &bundle.records[units.records[u]];
    let mut covs = vec![
        Covariate {
            name: "risk_group_high".into(),
            group: CovariateGroup::Biomarker,
            values: keep.iter().map(|&u| f64::from(u8::from(groups[&rec(u).subject_id] == RiskGroup::High))).collect(),
        },
        Covariate {
            name: "severity_score".into(),
            group: CovariateGroup::Severity,
            values: keep.iter().map(|&u| f64::from(bundle.samples[units.samples[u]].severity)).collect(),
        },
    ];
    for (j, name) in bundle.covariate_names().into_iter().enumerate() {
        let group = if j < crate::synthdata::N_DEMOGRAPHIC { CovariateGroup::Demographic } else { CovariateGroup::Variant };
        covs.push(Covariate { name, group, values: keep.iter().map(|&u| rec(u).covariates[j]).collect() });
    }
    let time = keep.iter().map(|&u| units.time[u]).collect();
    let event = keep.iter().map(|&u| units.event[u]).collect();
    let samples = keep.iter().map(|&u| units.samples[u]).collect();
    Ok((covs, time, event, samples))
}
