//! Acceptance suite. Runs every criterion in sequence, prints one
//! `criterion N: PASS|FAIL` line each, and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use prognosis::fusion::{FusionMode, GateMode, SurvivalSet};
use prognosis::pipeline::{
    biomarker_inputs, fit_stage2, held_out_groups, risk_rows, run_ablation, stage1_samples, unit_features, AblationConfig,
    FoldRun, ModelId, PipelineConfig, RiskRow, Units,
};
use prognosis::pretrain::{accuracy, train_stage1};
use prognosis::survstats::biomarker::{biomarker_analysis, SCREEN_ALPHA};
use prognosis::survstats::cv::fold_splits;
use prognosis::survstats::{concordance_index, logrank_test};
use prognosis::synthdata::{generate_cohort, DatasetBundle, SynthConfig};
use prognosis::Exec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
    }
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let n = 200;
    let counts = [
        ("concordance", common::sweep::c_index(n, 101)?),
        ("auc", common::sweep::horizon_auc(n, 102)?),
        ("km", common::sweep::kaplan_meier(n, 103)?),
        ("logrank", common::sweep::logrank(n, 104)?),
        ("cox_loss", common::sweep::cox(n, 1e-10, 105)?),
    ];
    within(start.elapsed(), Duration::from_secs(30))?;
    let detail: Vec<String> = counts.iter().map(|(k, c)| format!("{k} {c}")).collect();
    require(counts.iter().all(|(_, c)| *c >= 100), format!("instances compared: {}", detail.join(", ")))
}

fn scan() -> Outcome {
    let start = Instant::now();
    let blocked = common::scan::blocked_vs_sequential(256, 50, 201);
    let memoryless = (0..5).map(common::scan::memoryless_ss2d).fold(0.0, f64::max);
    within(start.elapsed(), Duration::from_secs(30))?;
    require(
        blocked <= 1e-5 && memoryless <= 1e-6,
        format!("blocked vs sequential {blocked:.2e} (≤ 1e-5), memoryless ss2d {memoryless:.2e} (≤ 1e-6)"),
    )
}

fn gradients() -> Outcome {
    use common::grad;
    let start = Instant::now();
    let mut checks = vec![("vss block", grad::vss_block(301)), ("stage1 loss", grad::stage1_loss(302))];
    checks.push(("fusion step", grad::fusion_step(303)));
    for mode in [GateMode::Hard, GateMode::Soft] {
        checks.push(("gate", grad::gate(mode, 304)));
    }
    checks.push(("cox loss", grad::cox(305)));
    for (f, g) in [(FusionMode::MultiscaleAttention, GateMode::Hard), (FusionMode::Concat, GateMode::None)] {
        checks.push(("fusion model", grad::fusion_model(f, g, 306)));
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    let worst = checks.iter().map(|(_, (e, _))| *e).fold(0.0, f64::max);
    let largest = checks.iter().map(|(_, (_, n))| *n).max().unwrap_or(0);
    let bad: Vec<String> = checks.iter().filter(|(_, (e, _))| *e > 1e-3).map(|(k, (e, _))| format!("{k} {e:.2e}")).collect();
    require(
        bad.is_empty() && largest <= 10_000,
        format!("{} checks, worst relative error {worst:.2e}, largest model {largest} params {}", checks.len(), bad.join(" ")),
    )
}

fn structure() -> Outcome {
    use common::checks;
    let results = [
        ("zero-branch block", (0..5).all(checks::zero_branch_identity)),
        ("cox shift", (0..5).all(checks::cox_shift_exact)),
        ("zero-prototype gate", (0..5).all(checks::zero_prototype_gate_identity)),
        ("cosine scale", (0..5).all(checks::cosine_scale_exact)),
        ("stage-1 freeze", common::freeze::stage2_preserves_stage1(401)),
    ];
    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(k, _)| *k).collect();
    require(failed.is_empty(), if failed.is_empty() { "all identities exact".into() } else { format!("failed: {}", failed.join(", ")) })
}

fn cox_calibration() -> Outcome {
    let (coef, rejections) = common::checks::cox_calibration(100);
    let err = (coef - 2f64.ln()).abs();
    require(err <= 0.15 && rejections <= 3, format!("log-HR error {err:.3} (≤ 0.15), null rejections {rejections}/20 (≤ 3)"))
}

/// Cohort and pipeline settings shared by the end-to-end criteria. The
/// backbone is narrower than the default to fit the single-core budget.
fn e2e_setup() -> (DatasetBundle, PipelineConfig) {
    let bundle = generate_cohort(&SynthConfig { n_subjects: 400, image_size: 32, lesion_signal: 1.0, seed: 42, ..Default::default() }, Exec::default())
        .expect("cohort");
    let mut cfg = PipelineConfig::default();
    cfg.backbone.stage_channels = [16, 32, 64, 96];
    (bundle, cfg)
}

// one shuffle carries a cohort-wide chance association that every fold
// inherits, so the null level is averaged over several
const NULL_DRAWS: u64 = 4;

struct E2e {
    rows: Vec<RiskRow>,
    outcome: Outcome,
}

fn planted_signal(bundle: &DatasetBundle, cfg: &PipelineConfig) -> E2e {
    let start = Instant::now();
    let exec = Exec::default();
    let units = Units::new(bundle).expect("units");
    let splits = fold_splits(&units.fold_assignment(cfg.k, cfg.seed).expect("folds"), cfg.k);
    let perms: Vec<Vec<usize>> = (0..NULL_DRAWS)
        .map(|j| {
            let mut perm: Vec<usize> = (0..units.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64((cfg.seed ^ 0x5EED).wrapping_add(j)));
            perm
        })
        .collect();

    let (mut acc, mut real, mut permuted, mut rows) = (vec![], vec![], vec![], vec![]);
    let mut pipeline = Duration::ZERO;
    for split in &splits {
        let fold_start = Instant::now();
        let samples = stage1_samples(bundle, &units, &split.test);
        let s1 = train_stage1(&samples, None, &cfg.backbone, &cfg.stage1, exec, None).expect("stage 1");
        acc.push(accuracy(&s1.model, &samples, exec).expect("accuracy"));
        let set = unit_features(bundle, &units, &s1.model, exec).expect("features");

        let (model, log, selected) = fit_stage2(&set, split, &s1.model, cfg, exec).expect("stage 2");
        let test = set.subset(&split.test);
        let test_risk = model.risks(&test.features, exec).expect("risks");
        real.push(concordance_index(&test_risk, &test.time, &test.event).expect("C"));
        let run = FoldRun {
            fold: split.fold,
            stage1_log: s1.log,
            stage2_log: log,
            stage2_selected_epoch: selected,
            train_risk: model.risks(&set.subset(&split.train).features, exec).expect("risks"),
            test_risk,
            model,
        };
        rows.extend(risk_rows(bundle, &units, split, &run));
        pipeline += fold_start.elapsed();

        // same features, outcomes shuffled across units
        for perm in &perms {
            let shuffled = SurvivalSet {
                features: set.features.clone(),
                time: perm.iter().map(|&i| set.time[i]).collect(),
                event: perm.iter().map(|&i| set.event[i]).collect(),
            };
            let (null_model, _, _) = fit_stage2(&shuffled, split, &s1.model, cfg, exec).expect("stage 2 (permuted)");
            let test = shuffled.subset(&split.test);
            let risk = null_model.risks(&test.features, exec).expect("risks");
            permuted.push(concordance_index(&risk, &test.time, &test.event).expect("C"));
        }
    }
    let total = start.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min_acc = acc.iter().copied().fold(1.0, f64::min);
    let (c, c_null) = (mean(&real), mean(&permuted));
    let detail = format!(
        "stage-1 train accuracy min {min_acc:.3} (≥ 0.90, {} epochs), held-out C {c:.3} (≥ 0.75), permuted C {c_null:.3} over {NULL_DRAWS} shuffles (≤ 0.55), pipeline {:.0}s (< 600s), {:.0}s with controls",
        cfg.stage1.epochs,
        pipeline.as_secs_f64(),
        total.as_secs_f64()
    );
    let ok = min_acc >= 0.90 && cfg.stage1.epochs <= 30 && c >= 0.75 && c_null <= 0.55 && pipeline < Duration::from_secs(600);
    E2e { rows, outcome: require(ok, detail) }
}

fn ablation(bundle: &DatasetBundle, cfg: &PipelineConfig) -> Outcome {
    let abl = AblationConfig { models: vec![ModelId::M1, ModelId::M2, ModelId::M4], seeds: vec![0, 1, 2, 3, 4], folds_per_seed: 1 };
    let report = run_ablation(bundle, cfg, &abl, Exec::default()).map_err(|e| e.to_string())?;
    print!("{}", report.to_text());
    let mean = |m| report.row(m).map(|r| r.summary.mean).unwrap_or(f64::NAN);
    let (m1, m2, m4) = (mean(ModelId::M1), mean(ModelId::M2), mean(ModelId::M4));
    let d41 = report.mean_paired_difference(ModelId::M4, ModelId::M1).unwrap_or(f64::NAN);
    let d21 = report.mean_paired_difference(ModelId::M2, ModelId::M1).unwrap_or(f64::NAN);
    require(
        m4 > m1 && d41 > 0.0 && m2 >= m1 && d21 >= 0.0,
        format!("M1 {m1:.3}, M2 {m2:.3}, M4 {m4:.3}; paired M4−M1 {d41:+.3}, M2−M1 {d21:+.3}"),
    )
}

fn biomarker(bundle: &DatasetBundle, rows: &[RiskRow]) -> Outcome {
    let groups = held_out_groups(rows).map_err(|e| e.to_string())?;
    let (covs, time, event, _) = biomarker_inputs(bundle, &groups).map_err(|e| e.to_string())?;
    let report = biomarker_analysis(&covs, &time, &event, SCREEN_ALPHA).map_err(|e| e.to_string())?;
    print!("{}", report.to_text());
    let fit = report
        .multivariate
        .as_ref()
        .and_then(|m| m.get("risk_group_high"))
        .ok_or("risk group did not enter the multivariate model")?;
    let split = |high: bool| -> (Vec<f64>, Vec<bool>) {
        (0..time.len()).filter(|&i| (covs[0].values[i] > 0.5) == high).map(|i| (time[i], event[i])).unzip()
    };
    let ((ta, ea), (tb, eb)) = (split(true), split(false));
    let lr = logrank_test(&ta, &ea, &tb, &eb).map_err(|e| e.to_string())?;
    require(
        fit.hazard_ratio > 1.0 && fit.p_value < 0.005 && lr.p_value < 0.01,
        format!("multivariate HR {:.2} p {:.1e} (> 1, < 0.005), log-rank p {:.1e} (< 0.01)", fit.hazard_ratio, fit.p_value, lr.p_value),
    )
}

fn report(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    match outcome {
        Ok(d) => {
            println!("criterion {n}: PASS  {d}");
            true
        }
        Err(d) => {
            println!("criterion {n}: FAIL  {d}");
            false
        }
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut ok = true;
    if wanted(1) {
        ok &= report(1, oracles);
    }
    if wanted(2) {
        ok &= report(2, scan);
    }
    if wanted(3) {
        ok &= report(3, gradients);
    }
    if wanted(4) {
        ok &= report(4, structure);
    }
    let heavy = wanted(5) || wanted(6) || wanted(8);
    let setup = heavy.then(e2e_setup);
    let mut rows = Vec::new();
    if let Some((bundle, cfg)) = &setup {
        if wanted(5) || wanted(8) {
            let mut e2e = None;
            let passed = report(5, || {
                let r = planted_signal(bundle, cfg);
                let out = r.outcome.clone();
                e2e = Some(r);
                out
            });
            ok &= passed || !wanted(5);
            rows = e2e.map(|r| r.rows).unwrap_or_default();
        }
        if wanted(6) {
            ok &= report(6, || ablation(bundle, cfg));
        }
    }
    if wanted(7) {
        ok &= report(7, cox_calibration);
    }
    if let Some((bundle, _)) = &setup {
        if wanted(8) {
            ok &= report(8, || biomarker(bundle, &rows));
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
