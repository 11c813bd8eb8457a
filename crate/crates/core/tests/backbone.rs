use ndarray::{Array2, Array3};
use prognosis::backbone::block::{BlockShape, VssBlock};
use prognosis::backbone::scan::ScanStrategy;
use prognosis::backbone::ss2d::Ss2d;
use prognosis::backbone::{Backbone, BackboneConfig};
use prognosis::nn::gradcheck::{max_relative_error, numeric_gradient, numeric_param_gradient, DEFAULT_STEP};
use prognosis::nn::{flatten, num_params, zeros_like};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn weighted(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (y * w).sum()
}

fn small_shape() -> BlockShape {
    BlockShape { channels: 4, state_dim: 3, ffn_expansion: 2, sa_kernel: 3, ca_reduction: 2 }
}

#[test]
fn vss_block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (3, 4);
    let block = VssBlock::new(small_shape(), &mut rng);
    assert!(num_params(&block) <= 10_000);
    let x = random(h * w, 4, &mut rng);
    let wout = random(h * w, 4, &mut rng);
    let strategy = ScanStrategy::Sequential;
    let loss = |b: &VssBlock, x: &Array2<f64>| weighted(&b.forward(x.view(), h, w, strategy).unwrap().0, &wout);

    let (_, cache) = block.forward(x.view(), h, w, strategy).unwrap();
    let mut grad = zeros_like(&block);
    let dx = block.backward(h, w, &cache, wout.view(), &mut grad, strategy);

    let num = numeric_param_gradient(&block, DEFAULT_STEP, |b| loss(b, &x));
    let err = max_relative_error(&flatten(&grad), &num, 1e-6);
    assert!(err < 1e-3, "parameter gradient error {err}");

    let num_x = numeric_gradient(x.as_slice().unwrap(), DEFAULT_STEP, |v| {
        loss(&block, &Array2::from_shape_vec((h * w, 4), v.to_vec()).unwrap())
    });
    let err = max_relative_error(dx.as_slice().unwrap(), &num_x, 1e-6);
    assert!(err < 1e-3, "input gradient error {err}");
}

#[test]
fn zero_branch_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut block = VssBlock::new(small_shape(), &mut rng);
    block.zero_branches();
    let x = random(12, 4, &mut rng);
    let (y, _) = block.forward(x.view(), 3, 4, ScanStrategy::Sequential).unwrap();
    assert_eq!(y, x);
}

#[test]
fn ss2d_is_equivariant_under_half_turn() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, c) = (3, 5, 4);
    let ss = Ss2d::new(c, 3, &mut rng);
    let mut swapped = ss.clone();
    swapped.directions.swap(0, 1);
    swapped.directions.swap(2, 3);
    let x = random(h * w, c, &mut rng);
    let rot = |m: &Array2<f64>| {
        let n = m.nrows();
        Array2::from_shape_fn(m.dim(), |(t, k)| m[[n - 1 - t, k]])
    };
    let y = ss.merged(x.view(), h, w).unwrap();
    let y_rot = swapped.merged(rot(&x).view(), h, w).unwrap();
    let err = (&rot(&y) - &y_rot).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
    assert!(err < 1e-10, "{err}");
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let cfg = BackboneConfig {
        image_size: 16,
        patch_size: 2,
        stage_channels: [3, 4, 4, 6],
        blocks_per_stage: [1, 0, 1, 1],
        state_dim: 2,
        ffn_expansion: 1,
        sa_kernel: 3,
        ca_reduction: 2,
        scan: ScanStrategy::Blocked { chunk: 3 },
    };
    let bb = Backbone::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(0.0..1.0));
    let (feats, cache) = bb.forward(&img).unwrap();
    let wts: Vec<Array2<f64>> = feats.maps.iter().map(|m| random(m.data.nrows(), m.channels(), &mut rng)).collect();
    let mut grad = zeros_like(&bb);
    let d = [Some(wts[0].clone()), Some(wts[1].clone()), None, Some(wts[3].clone())];
    bb.backward(&cache, &d, &mut grad);
    let wts_partial = [wts[0].clone(), wts[1].clone(), Array2::zeros(wts[2].dim()), wts[3].clone()];
    let num = numeric_param_gradient(&bb, DEFAULT_STEP, |b| {
        let f = b.features(&img).unwrap();
        f.maps.iter().zip(&wts_partial).map(|(m, w)| weighted(&m.data, w)).sum::<f64>()
    });
    let err = max_relative_error(&flatten(&grad), &num, 1e-6);
    assert!(err < 1e-3, "backbone gradient error {err}");
}
