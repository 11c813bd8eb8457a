//! Finite-difference checks of the hand-written backward passes. Each
//! returns the worst relative error and the number of parameters involved.

use ndarray::{Array1, Array2, Array3};
use prognosis::backbone::scan::ScanStrategy;
use prognosis::backbone::BackboneConfig;
use prognosis::fusion::attention::Mhsa;
use prognosis::fusion::gate::prototype_gate_backward;
use prognosis::fusion::{
    batch_gradient, cox_loss, prototype_gate, AttentionCore, FusionConfig, FusionMode, FusionModel, GateMode, InputScaler,
    SubjectFeatures, SurvivalSet,
};
use prognosis::backbone::block::{BlockShape, Ffn, VssBlock};
use prognosis::nn::gradcheck::{max_relative_error, numeric_gradient, numeric_param_gradient, DEFAULT_STEP};
use prognosis::nn::{flatten, load_flat, num_params, zeros_like, LayerNorm, Linear};
use prognosis::pretrain::{PrototypeBank, Stage1Model};
use prognosis::synthdata::ClassScheme;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLOOR: f64 = 1e-6;

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch_size: 2,
        stage_channels: [3, 4, 4, 6],
        blocks_per_stage: [1, 0, 1, 1],
        state_dim: 2,
        ffn_expansion: 1,
        sa_kernel: 3,
        ca_reduction: 2,
        scan: ScanStrategy::Sequential,
    }
}

fn vec_of(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
}

/// Cross-entropy over cosine logits, through the whole backbone and the prototypes.
pub fn stage1_loss(seed: u64) -> (f64, usize) {
    let model = Stage1Model::new(tiny_backbone(), ClassScheme::Four, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-1.5..1.5));
    let label = 2;
    let scale = 3.0;
    let mut grad = zeros_like(&model);
    model.sample_step(&img, label, scale, &mut grad).unwrap();
    let num = numeric_param_gradient(&model, DEFAULT_STEP, |m| {
        let mut scratch = zeros_like(m);
        m.sample_step(&img, label, scale, &mut scratch).unwrap().0
    });
    (max_relative_error(&flatten(&grad), &num, FLOOR), num_params(&model))
}

/// One VSS block under a random linear readout: parameters and input.
pub fn vss_block(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = BlockShape { channels: 4, state_dim: 3, ffn_expansion: 2, sa_kernel: 3, ca_reduction: 2 };
    let block = VssBlock::new(shape, &mut rng);
    let (h, w) = (3, 4);
    let x = Array2::from_shape_fn((h * w, 4), |_| rng.random_range(-1.0..1.0));
    let wout = Array2::from_shape_fn((h * w, 4), |_| rng.random_range(-1.0..1.0));
    let strategy = ScanStrategy::Sequential;
    let loss = |b: &VssBlock, x: &Array2<f64>| (&b.forward(x.view(), h, w, strategy).unwrap().0 * &wout).sum();
    let (_, cache) = block.forward(x.view(), h, w, strategy).unwrap();
    let mut grad = zeros_like(&block);
    let dx = block.backward(h, w, &cache, wout.view(), &mut grad, strategy);
    let num = numeric_param_gradient(&block, DEFAULT_STEP, |b| loss(b, &x));
    let num_x = numeric_gradient(x.as_slice().unwrap(), DEFAULT_STEP, |v| {
        loss(&block, &Array2::from_shape_vec((h * w, 4), v.to_vec()).unwrap())
    });
    let err = max_relative_error(&flatten(&grad), &num, FLOOR).max(max_relative_error(dx.as_slice().unwrap(), &num_x, FLOOR));
    (err, num_params(&block))
}

fn small_core(d: usize, d_e: usize, widths: [usize; 4], rng: &mut ChaCha8Rng) -> AttentionCore {
    let mut ln = LayerNorm::new(d);
    ln.gamma = vec_of(d, rng) + 1.0;
    ln.beta = vec_of(d, rng);
    let mut ffn = Ffn::new(d, 2, rng);
    ffn.down.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    AttentionCore {
        proj: widths.iter().map(|&c| Linear::new(c, d, true, rng)).collect(),
        w_tab: Linear::new(d_e, d, false, rng),
        mhsa: Mhsa::new(d, 2, rng),
        ln,
        ffn,
    }
}

/// One attention refinement step: parameters, query and pooled scale input.
pub fn fusion_step(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let core = small_core(d, 3, [3, 4, 4, 6], &mut rng);
    let q = vec_of(d, &mut rng);
    let fbar = vec_of(d, &mut rng);
    let w = vec_of(d, &mut rng);
    let (_, cache) = core.fuse_step(&q, &fbar);
    let mut grad = zeros_like(&core);
    let (dq, dfbar) = core.fuse_step_backward(&cache, &w, &mut grad);
    let num = numeric_param_gradient(&core, DEFAULT_STEP, |c| c.fuse_step(&q, &fbar).0.dot(&w));
    let mut err = max_relative_error(&flatten(&grad), &num, FLOOR);
    let nq = numeric_gradient(q.as_slice().unwrap(), DEFAULT_STEP, |v| core.fuse_step(&Array1::from(v.to_vec()), &fbar).0.dot(&w));
    let nf = numeric_gradient(fbar.as_slice().unwrap(), DEFAULT_STEP, |v| core.fuse_step(&q, &Array1::from(v.to_vec())).0.dot(&w));
    err = err.max(max_relative_error(dq.as_slice().unwrap(), &nq, FLOOR));
    err = err.max(max_relative_error(dfbar.as_slice().unwrap(), &nf, FLOOR));
    (err, num_params(&core))
}

/// Prototype gate with respect to the query, f4 and the prototypes.
pub fn gate(mode: GateMode, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k) = (5, 4);
    let bank = PrototypeBank::new(k, d, &mut rng);
    let q = vec_of(d, &mut rng);
    let f4 = vec_of(d, &mut rng);
    let w = vec_of(d, &mut rng);
    let loss = |q: &Array1<f64>, f: &Array1<f64>, b: &PrototypeBank| prototype_gate(q, f.view(), b, mode).unwrap().dot(&w);
    let mut dbank = zeros_like(&bank);
    let (dq, df) = prototype_gate_backward(&q, f4.view(), &bank, mode, &w, &mut dbank).unwrap();
    let nq = numeric_gradient(q.as_slice().unwrap(), DEFAULT_STEP, |v| loss(&Array1::from(v.to_vec()), &f4, &bank));
    let nf = numeric_gradient(f4.as_slice().unwrap(), DEFAULT_STEP, |v| loss(&q, &Array1::from(v.to_vec()), &bank));
    let nb = numeric_param_gradient(&bank, DEFAULT_STEP, |b| loss(&q, &f4, b));
    let err = max_relative_error(dq.as_slice().unwrap(), &nq, FLOOR)
        .max(max_relative_error(df.as_slice().unwrap(), &nf, FLOOR))
        .max(max_relative_error(&flatten(&dbank), &nb, FLOOR));
    (err, d * k)
}

/// Negative partial log-likelihood with respect to the risks.
pub fn cox(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let beta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let time = super::tied_times(n, 5, &mut rng);
    let mut event = super::coin_flips(n, 0.6, &mut rng);
    event[0] = true;
    let got = cox_loss(&beta, &time, &event).unwrap().unwrap();
    let num = numeric_gradient(&beta, DEFAULT_STEP, |b| cox_loss(b, &time, &event).unwrap().unwrap().value);
    (max_relative_error(&got.grad, &num, FLOOR), n)
}

pub fn survival_set(n: usize, widths: [usize; 4], d_e: usize, seed: u64) -> SurvivalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..n)
        .map(|_| SubjectFeatures {
            pooled: widths.map(|w| vec_of(w, &mut rng) * 2.0 + 0.5),
            covariates: Array1::from_shape_fn(d_e, |_| f64::from(rng.random_range(0..3u8))),
        })
        .collect();
    let time = super::tied_times(n, 6, &mut rng);
    let mut event = super::coin_flips(n, 0.6, &mut rng);
    event[0] = true;
    SurvivalSet { features, time, event }
}

/// Batch Cox loss through the whole Stage-2 model (projections, all four
/// fusion steps, the gate and the head), with a fitted input scaler.
pub fn fusion_model(fusion: FusionMode, gate: GateMode, seed: u64) -> (f64, usize) {
    let widths = [3, 4, 4, 6];
    let d_e = 5;
    let set = survival_set(10, widths, d_e, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    let bank = PrototypeBank::new(4, 6, &mut rng);
    let cfg = FusionConfig { fusion_mode: fusion, gate_mode: gate, n_heads: 2, seed, ..FusionConfig::default() };
    let mut model = FusionModel::new(cfg, widths, d_e, Some(bank)).unwrap();
    model.scaler = InputScaler::fit(&set.features);
    if let Some(core) = model.core.as_mut() {
        core.ffn.down.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let batch: Vec<usize> = (0..set.len()).collect();
    let (_, grad) = batch_gradient(&model, &set, &batch, prognosis::Exec::Sequential).unwrap().unwrap();
    let base = flatten(&model);
    let mut probe = model.clone();
    let num = numeric_gradient(&base, DEFAULT_STEP, |x| {
        load_flat(&mut probe, x);
        batch_gradient(&probe, &set, &batch, prognosis::Exec::Sequential).unwrap().unwrap().0
    });
    (max_relative_error(&flatten(&grad), &num, FLOOR), num_params(&model))
}
