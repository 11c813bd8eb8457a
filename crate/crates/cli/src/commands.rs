use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use prognosis::fusion::{FusionModel, STAGE2_KIND};
use prognosis::nn::checkpoint::{file_hash, Archive};
use prognosis::pipeline::{
    biomarker_inputs, fit_stage2, held_out_groups, read_risk_table, run_ablation, stage1_samples, unit_features,
    write_risk_table, RiskRow, Units,
};
use prognosis::pretrain::{export_embeddings, train_stage1, Stage1Model};
use prognosis::survstats::biomarker::{biomarker_analysis, SCREEN_ALPHA};
use prognosis::survstats::cv::{fold_splits, FoldSplit, MeanSd, RiskGroup};
use prognosis::survstats::km::{km_csv, km_svg, KmCurve};
use prognosis::survstats::{concordance_index, km_estimate, logrank_test, time_dependent_auc};
use prognosis::synthdata::manifest::manifest_hash;
use prognosis::synthdata::{generate_dataset, load_dataset, DatasetBundle};
use serde::Serialize;
use serde_json::json;

use crate::config::{create_dir, write, ExperimentConfig};
use crate::CliError;

const SEVERITY_CLASSES: [&str; 4] = ["no", "early", "intermediate", "late"];

fn json_string<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn require_file(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("expected {} (run `prognosis {hint}` first)", path.display())))
    }
}

fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold{fold}"))
}

struct Prepared {
    bundle: DatasetBundle,
    units: Units,
    splits: Vec<FoldSplit>,
    manifest_sha256: String,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let manifest = cfg.manifest_path();
    require_file(&manifest, "synth")?;
    let bundle = load_dataset(&manifest)?;
    let units = Units::new(&bundle)?;
    let p = cfg.pipeline();
    let splits = fold_splits(&units.fold_assignment(p.k, p.seed)?, p.k);
    Ok(Prepared { bundle, units, splits, manifest_sha256: manifest_hash(&manifest)? })
}

fn selected<'a>(splits: &'a [FoldSplit], fold: Option<usize>) -> Result<Vec<&'a FoldSplit>, CliError> {
    match fold {
        Some(f) if f >= splits.len() => {
            Err(CliError::Validation(format!("fold {f} out of range for k = {} (valid: 0..{})", splits.len(), splits.len() - 1)))
        }
        Some(f) => Ok(vec![&splits[f]]),
        None => Ok(splits.iter().collect()),
    }
}

pub fn synth(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = cfg.out_dir.join("data");
    cfg.snapshot(&dir)?;
    let bundle = generate_dataset(&cfg.synth, &dir)?;
    let manifest = dir.join("manifest.csv");
    let summary = json!({
        "manifest": manifest,
        "manifest_sha256": manifest_hash(&manifest)?,
        "subjects": bundle.records.len(),
        "samples": bundle.samples.len(),
        "events": bundle.records.iter().filter(|r| r.event).count(),
    });
    print!("{}", json_string(&summary));
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig, fold: Option<usize>) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    let root = cfg.out_dir.join("pretrain");
    cfg.snapshot(&root)?;
    let p = cfg.pipeline();
    for split in selected(&prep.splits, fold)? {
        let dir = fold_dir(&root, split.fold);
        create_dir(&dir)?;
        let samples = stage1_samples(&prep.bundle, &prep.units, &split.test);
        let log_path = dir.join("stage1_log.txt");
        let mut log = BufWriter::new(File::create(&log_path).map_err(|e| prognosis::Error::io(&log_path, e))?);
        let result = train_stage1(&samples, None, &p.backbone, &p.stage1, cfg.device.exec(), Some(&mut log))?;
        let accuracy = prognosis::pretrain::accuracy(&result.model, &samples, cfg.device.exec())?;
        let meta = json!({ "fold": split.fold, "manifest_sha256": prep.manifest_sha256, "train_accuracy": accuracy });
        let hash = result.model.save(&dir.join("stage1.ckpt"), meta)?;
        write(&dir.join("stage1_log.json"), &json_string(&result.log))?;
        println!("fold {}: {} training images, train accuracy {accuracy:.4}, checkpoint sha256 {hash}", split.fold, samples.len());
    }
    Ok(())
}

fn load_stage1(cfg: &ExperimentConfig, fold: usize) -> Result<(Stage1Model, PathBuf), CliError> {
    let path = fold_dir(&cfg.out_dir.join("pretrain"), fold).join("stage1.ckpt");
    require_file(&path, "pretrain")?;
    Ok((Stage1Model::load(&path)?, path))
}

pub fn train(cfg: &ExperimentConfig, fold: Option<usize>) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    let root = cfg.out_dir.join("train");
    cfg.snapshot(&root)?;
    let p = cfg.pipeline();
    for split in selected(&prep.splits, fold)? {
        let (stage1, s1_path) = load_stage1(cfg, split.fold)?;
        let set = unit_features(&prep.bundle, &prep.units, &stage1, cfg.device.exec())?;
        let (model, log, selected_epoch) = fit_stage2(&set, split, &stage1, &p, cfg.device.exec())?;
        let dir = fold_dir(&root, split.fold);
        create_dir(&dir)?;
        model.save(&dir.join("stage2.ckpt"), Some(&file_hash(&s1_path)?))?;
        write(&dir.join("stage2_log.json"), &json_string(&json!({ "selected_epoch": selected_epoch, "epochs": log })))?;
        let best = log.get(selected_epoch.saturating_sub(1)).and_then(|l| l.val_c_index);
        println!("fold {}: selected epoch {selected_epoch}, validation C-index {best:?}", split.fold);
    }
    Ok(())
}

fn load_stage2(cfg: &ExperimentConfig, fold: usize, stage1: &Stage1Model, s1_path: &Path) -> Result<FusionModel, CliError> {
    let path = fold_dir(&cfg.out_dir.join("train"), fold).join("stage2.ckpt");
    require_file(&path, "train")?;
    let arc = Archive::read(&path)?;
    if arc.kind != STAGE2_KIND {
        return Err(CliError::Validation(format!("{} is not a stage-2 checkpoint", path.display())));
    }
    let expected = file_hash(s1_path)?;
    if arc.config["stage1_sha256"].as_str() != Some(expected.as_str()) {
        return Err(CliError::Validation(format!(
            "{} was trained on a different stage-1 checkpoint than {} (re-run `prognosis train`)",
            path.display(),
            s1_path.display()
        )));
    }
    Ok(FusionModel::from_archive(&arc, Some(stage1.bank.clone()))?)
}

#[derive(Serialize)]
struct FoldEval {
    fold: usize,
    n_train: usize,
    n_test: usize,
    test_events: usize,
    c_index: Option<f64>,
    auc: Option<f64>,
}

fn summary(m: Option<MeanSd>) -> serde_json::Value {
    m.map_or(serde_json::Value::Null, |m| json!({ "mean": m.mean, "sd": m.sd, "n": m.n, "text": m.to_string() }))
}

pub fn eval(cfg: &ExperimentConfig, fold: Option<usize>) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    let root = cfg.out_dir.join("eval");
    cfg.snapshot(&root)?;
    let exec = cfg.device.exec();
    let horizon = cfg.cv.horizon;
    let mut rows: Vec<RiskRow> = Vec::new();
    let mut folds = Vec::new();
    for split in selected(&prep.splits, fold)? {
        let (stage1, s1_path) = load_stage1(cfg, split.fold)?;
        let model = load_stage2(cfg, split.fold, &stage1, &s1_path)?;
        let set = unit_features(&prep.bundle, &prep.units, &stage1, exec)?;
        let train = set.subset(&split.train);
        let test = set.subset(&split.test);
        let train_risk = model.risks(&train.features, exec)?;
        let test_risk = model.risks(&test.features, exec)?;
        let id = |u: usize| prep.bundle.records[prep.units.records[u]].subject_id.clone();
        for (&u, &b) in split.train.iter().zip(&train_risk) {
            rows.push(RiskRow { subject_id: id(u), beta: b, fold: split.fold, split: "train".into() });
        }
        for (&u, &b) in split.test.iter().zip(&test_risk) {
            rows.push(RiskRow { subject_id: id(u), beta: b, fold: split.fold, split: "test".into() });
        }
        folds.push(FoldEval {
            fold: split.fold,
            n_train: split.train.len(),
            n_test: split.test.len(),
            test_events: test.event.iter().filter(|&&e| e).count(),
            c_index: concordance_index(&test_risk, &test.time, &test.event).ok(),
            auc: time_dependent_auc(&test_risk, &test.time, &test.event, horizon).ok(),
        });
    }
    write_risk_table(&rows, &root.join("risks.csv"))?;
    let cs: Vec<f64> = folds.iter().filter_map(|f| f.c_index).collect();
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
    let metrics = json!({
        "horizon": horizon,
        "manifest_sha256": prep.manifest_sha256,
        "folds": folds,
        "c_index": summary(MeanSd::of(&cs)),
        "auc": summary(MeanSd::of(&aucs)),
    });
    write(&root.join("metrics.json"), &json_string(&metrics))?;
    let show = |m: Option<MeanSd>| m.map_or("n/a".to_string(), |m| m.to_string());
    println!("C-index {}", show(MeanSd::of(&cs)));
    println!("AUC@{horizon} {}", show(MeanSd::of(&aucs)));
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let manifest = cfg.manifest_path();
    require_file(&manifest, "synth")?;
    let bundle = load_dataset(&manifest)?;
    let root = cfg.out_dir.join("ablation");
    cfg.snapshot(&root)?;
    let report = run_ablation(&bundle, &cfg.pipeline(), &cfg.ablation, cfg.device.exec())?;
    write(&root.join("table2.txt"), &report.to_text())?;
    write(&root.join("table2.csv"), &report.to_csv())?;
    write(&root.join("report.json"), &json_string(&report))?;
    print!("{}", report.to_text());
    Ok(())
}

/// High- versus low-risk curves over the units selected by `keep`.
fn km_pair(time: &[f64], event: &[bool], high: &[bool], keep: &[bool]) -> Result<Vec<(String, KmCurve)>, CliError> {
    let mut curves = Vec::new();
    for (name, want) in [("high", true), ("low", false)] {
        let (t, e): (Vec<f64>, Vec<bool>) =
            (0..time.len()).filter(|&i| keep[i] && high[i] == want).map(|i| (time[i], event[i])).unzip();
        if !t.is_empty() {
            curves.push((name.to_string(), km_estimate(&t, &e)?));
        }
    }
    Ok(curves)
}

pub fn biomarker(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let manifest = cfg.manifest_path();
    require_file(&manifest, "synth")?;
    let bundle = load_dataset(&manifest)?;
    let risks = cfg.out_dir.join("eval").join("risks.csv");
    require_file(&risks, "eval")?;
    let groups = held_out_groups(&read_risk_table(&risks)?)?;
    let (covs, time, event, samples) = biomarker_inputs(&bundle, &groups)?;
    let report = biomarker_analysis(&covs, &time, &event, SCREEN_ALPHA)?;

    let root = cfg.out_dir.join("biomarker");
    cfg.snapshot(&root)?;
    write(&root.join("table4.csv"), &report.to_csv())?;
    write(&root.join("table4.txt"), &report.to_text())?;
    write(&root.join("report.json"), &json_string(&report))?;

    let high: Vec<bool> = covs[0].values.iter().map(|&v| v > 0.5).collect();
    let all = vec![true; time.len()];
    let ages = &covs.iter().find(|c| c.name == "age_z").expect("age covariate").values;
    let age_median = prognosis::survstats::cv::median(ages)?;
    let mut subgroups: Vec<(String, String, Vec<bool>)> = vec![("all".into(), "All subjects".into(), all)];
    for (c, name) in SEVERITY_CLASSES.iter().enumerate() {
        let keep: Vec<bool> = samples.iter().map(|&s| usize::from(bundle.samples[s].class_label) == c).collect();
        if keep.iter().any(|&k| k) {
            subgroups.push((format!("class_{name}"), format!("{name} AMD at baseline"), keep));
        }
    }
    subgroups.push(("age_below_median".into(), "Age below median".into(), ages.iter().map(|&a| a < age_median).collect()));
    subgroups.push(("age_at_or_above_median".into(), "Age at or above median".into(), ages.iter().map(|&a| a >= age_median).collect()));

    let mut tests = BTreeMap::new();
    for (file, title, keep) in &subgroups {
        let curves = km_pair(&time, &event, &high, keep)?;
        write(&root.join(format!("km_{file}.csv")), &km_csv(&curves))?;
        write(&root.join(format!("km_{file}.svg")), &km_svg(title, &curves))?;
        let pick = |h: bool| -> (Vec<f64>, Vec<bool>) {
            (0..time.len()).filter(|&i| keep[i] && high[i] == h).map(|i| (time[i], event[i])).unzip()
        };
        let ((ta, ea), (tb, eb)) = (pick(true), pick(false));
        let lr = logrank_test(&ta, &ea, &tb, &eb).ok();
        tests.insert(
            file.clone(),
            json!({
                "n_high": ta.len(),
                "n_low": tb.len(),
                "statistic": lr.as_ref().map(|l| l.statistic),
                "p_value": lr.as_ref().map(|l| l.p_value),
            }),
        );
    }
    write(&root.join("logrank.json"), &json_string(&tests))?;
    print!("{}", report.to_text());
    if let Some(p) = tests["all"]["p_value"].as_f64() {
        println!("log-rank (high vs low, all subjects) p = {p:.3e}");
    }
    let n_high = groups.values().filter(|&&g| g == RiskGroup::High).count();
    println!("{} held-out subjects, {n_high} high risk", groups.len());
    Ok(())
}

pub fn export(cfg: &ExperimentConfig, fold: Option<usize>) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    let root = cfg.out_dir.join("embeddings");
    cfg.snapshot(&root)?;
    let samples: Vec<_> = prep.bundle.samples.iter().collect();
    for split in selected(&prep.splits, fold)? {
        let (stage1, _) = load_stage1(cfg, split.fold)?;
        let path = root.join(format!("fold{}.csv", split.fold));
        export_embeddings(&stage1, &samples, &path, cfg.device.exec())?;
        println!("{}", path.display());
    }
    Ok(())
}
