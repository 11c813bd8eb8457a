use prognosis::fusion::{FusionConfig, FusionMode, GateMode};
use prognosis::nn::checkpoint::file_hash;
use prognosis::nn::{num_params, param_hash};
use prognosis::pipeline::{fit_stage2, stage1_samples, unit_features, PipelineConfig, Units};
use prognosis::pretrain::{train_stage1, Stage1Config};
use prognosis::survstats::cv::fold_splits;
use prognosis::synthdata::{generate_cohort, SynthConfig};
use prognosis::Exec;

/// Stage 2 leaves the Stage-1 backbone and prototypes untouched, in memory
/// and on disk, and does not count the prototypes among its parameters.
pub fn stage2_preserves_stage1(seed: u64) -> bool {
    let bundle = generate_cohort(&SynthConfig { n_subjects: 60, image_size: 16, n_variants: 4, seed, ..Default::default() }, Exec::default())
        .unwrap();
    let cfg = PipelineConfig {
        backbone: super::grad::tiny_backbone(),
        stage1: Stage1Config { epochs: 1, batch_size: 8, ..Stage1Config::desk() },
        fusion: FusionConfig { n_heads: 2, epochs: 3, fusion_mode: FusionMode::MultiscaleAttention, gate_mode: GateMode::Hard, ..FusionConfig::desk() },
        ..PipelineConfig::default()
    };
    let units = Units::new(&bundle).unwrap();
    let split = &fold_splits(&units.fold_assignment(cfg.k, seed).unwrap(), cfg.k)[0];
    let s1 = train_stage1(&stage1_samples(&bundle, &units, &split.test), None, &cfg.backbone, &cfg.stage1, Exec::default(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1.ckpt");
    let written = s1.model.save(&path, serde_json::Value::Null).unwrap();
    let (backbone_before, bank_before) = (param_hash(&s1.model.backbone), param_hash(&s1.model.bank));

    let set = unit_features(&bundle, &units, &s1.model, Exec::default()).unwrap();
    let (gated, _, _) = fit_stage2(&set, split, &s1.model, &cfg, Exec::default()).unwrap();
    let plain_cfg = PipelineConfig { fusion: FusionConfig { gate_mode: GateMode::None, ..cfg.fusion.clone() }, ..cfg.clone() };
    let (plain, _, _) = fit_stage2(&set, split, &s1.model, &plain_cfg, Exec::default()).unwrap();

    param_hash(&s1.model.backbone) == backbone_before
        && param_hash(&s1.model.bank) == bank_before
        && file_hash(&path).unwrap() == written
        && gated.bank.as_ref().map(param_hash) == Some(bank_before)
        && num_params(&gated) == num_params(&plain)
}
