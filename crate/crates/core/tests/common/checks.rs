//! Structural identities and fitter calibration shared by the focused tests
//! and the acceptance run.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use prognosis::backbone::block::{BlockShape, VssBlock};
use prognosis::backbone::scan::ScanStrategy;
use prognosis::fusion::{apply_gate, cox_loss, prototype_gate, GateMode};
use prognosis::pretrain::{cosine_logits, PrototypeBank};
use prognosis::survstats::fit_cox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

/// VSS block with both residual branches zeroed returns its input bit for bit.
pub fn zero_branch_identity(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = BlockShape { channels: 4, state_dim: 3, ffn_expansion: 2, sa_kernel: 3, ca_reduction: 2 };
    let mut block = VssBlock::new(shape, &mut rng);
    block.zero_branches();
    let x = Array2::from_shape_fn((12, 4), |_| rng.random_range(-2.0..2.0));
    let (y, _) = block.forward(x.view(), 3, 4, ScanStrategy::Blocked { chunk: 5 }).unwrap();
    y == x
}

/// Dyadic risks shifted by representable constants give identical loss and gradient.
pub fn cox_shift_exact(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50).all(|_| {
        let n = rng.random_range(2..=20);
        let beta: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-256..256i32)) / 64.0).collect();
        let time = super::tied_times(n, 6, &mut rng);
        let mut event = super::coin_flips(n, 0.5, &mut rng);
        event[0] = true;
        let base = cox_loss(&beta, &time, &event).unwrap().unwrap();
        [-16.0, 0.5, 3.0, 1024.0].iter().all(|&s| {
            let moved: Vec<f64> = beta.iter().map(|b| b + s).collect();
            let m = cox_loss(&moved, &time, &event).unwrap().unwrap();
            m.value == base.value && m.grad == base.grad
        })
    })
}

/// A zero gate vector leaves the fused query untouched, and so does the
/// disabled gate whatever the prototypes.
pub fn zero_prototype_gate_identity(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Array1::from_shape_fn(6, |_| rng.random_range(-3.0..3.0));
    let f4 = Array1::from_shape_fn(6, |_| rng.random_range(-3.0..3.0));
    let bank = PrototypeBank::new(4, 6, &mut rng);
    apply_gate(&q, &Array1::zeros(6)) == q && prototype_gate(&q, f4.view(), &bank, GateMode::None).unwrap() == q
}

/// Cosine logits are unchanged by power-of-two rescaling of the feature or a prototype.
pub fn cosine_scale_exact(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50).all(|_| {
        let f = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let bank = PrototypeBank::new(4, 8, &mut rng);
        let base = cosine_logits(f.view(), &bank).unwrap();
        [0.125, 4.0, 1024.0].iter().all(|&a| {
            let mut scaled = bank.clone();
            scaled.g.row_mut(1).mapv_inplace(|v| v * a);
            cosine_logits((&f * a).view(), &bank).unwrap() == base && cosine_logits(f.view(), &scaled).unwrap() == base
        })
    })
}

/// Exponential survival with hazard `exp(log_hr · x)`, binary `x`, uniform censoring.
pub fn binary_cohort(n: usize, log_hr: f64, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = f64::from(u8::from(rng.random::<bool>()));
        let t = Exp::new((log_hr * xi).exp()).unwrap().sample(&mut rng);
        let c = 3.0 * rng.random::<f64>();
        x.push(xi);
        time.push(t.min(c));
        event.push(t <= c);
    }
    (x, time, event)
}

/// Fitted log-HR and its Wald p-value.
pub fn fit_binary(x: &[f64], time: &[f64], event: &[bool]) -> (f64, f64) {
    let fit = fit_cox(&DMatrix::from_column_slice(x.len(), 1, x), time, event, &["x".into()]).unwrap();
    (fit.covariates[0].coef, fit.covariates[0].p_value)
}

/// (fitted log-HR at true HR 2, rejections at 5% over 20 null cohorts).
pub fn cox_calibration(seed: u64) -> (f64, usize) {
    let (x, t, e) = binary_cohort(2000, 2f64.ln(), seed);
    let (coef, _) = fit_binary(&x, &t, &e);
    let rejections = (0..20).filter(|k| {
        let (x, t, e) = binary_cohort(2000, 0.0, seed + 1 + k);
        fit_binary(&x, &t, &e).1 < 0.05
    });
    (coef, rejections.count())
}
