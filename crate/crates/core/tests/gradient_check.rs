//! Analytic head gradients against central finite differences.

use mri_bench_core::model::head::{pool_and_flatten, pool_backward, HeadParams, HeadSpec, Mode};
use mri_bench_core::train::loss::cross_entropy_from_logits;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn loss(head: &HeadParams, x: &Array2<f64>, targets: &[usize], spec: &HeadSpec, dropout_seed: Option<u64>) -> f64 {
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mode = match rng.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Inference,
    };
    let (logits, _) = head.forward(x.view(), spec.dropout_rate, mode).unwrap();
    cross_entropy_from_logits(logits.view(), targets, None).unwrap().loss
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn check(dropout_seed: Option<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let spec = HeadSpec { dense_widths: vec![32, 32], ..Default::default() };
    let features = Array4::from_shape_simple_fn((6, 64, 4, 4), || rng.random_range(-1.0..1.0));
    let x = pool_and_flatten(features.view(), &spec).unwrap();
    assert_eq!(x.ncols(), 1024);
    let targets = [0, 1, 2, 3, 1, 2];
    let mut head = HeadParams::init(x.ncols(), &spec, &mut rng);
    // non-zero biases so every bias gradient path is exercised
    for layer in &mut head.layers {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }

    let mut drng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mode = match drng.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Inference,
    };
    let (logits, cache) = head.forward(x.view(), spec.dropout_rate, mode).unwrap();
    let out = cross_entropy_from_logits(logits.view(), &targets, None).unwrap();
    let (grads, dx) = head.backward(&cache, out.grad_logits.view(), true);
    let grads = grads.slices().iter().map(|s| s.to_vec()).collect::<Vec<_>>();

    let mut checked = 0;
    let mut nonzero = 0;
    let mut worst: f64 = 0.0;
    for t in 0..grads.len() {
        for _ in 0..40 {
            let j = rng.random_range(0..grads[t].len());
            let original = head.slices()[t][j];
            head.slices_mut()[t][j] = original + H;
            let up = loss(&head, &x, &targets, &spec, dropout_seed);
            head.slices_mut()[t][j] = original - H;
            let down = loss(&head, &x, &targets, &spec, dropout_seed);
            head.slices_mut()[t][j] = original;
            let numeric = (up - down) / (2.0 * H);
            let err = relative_error(grads[t][j], numeric);
            worst = worst.max(err);
            assert!(err < 1e-4, "tensor {t} index {j}: analytic {} numeric {numeric}", grads[t][j]);
            checked += 1;
            if grads[t][j].abs() > 1e-10 {
                nonzero += 1;
            }
        }
    }
    assert!(checked >= 100 && nonzero >= 100, "checked {checked}, nonzero {nonzero}");

    // input gradient through the pooling adjoint
    let dfeatures = pool_backward(dx.unwrap().view(), features.dim(), &spec).unwrap();
    for _ in 0..30 {
        let idx = (rng.random_range(0..6), rng.random_range(0..64), rng.random_range(0..4), rng.random_range(0..4));
        let mut f = features.clone();
        f[idx] += H;
        let up = loss(&head, &pool_and_flatten(f.view(), &spec).unwrap(), &targets, &spec, dropout_seed);
        f[idx] -= 2.0 * H;
        let down = loss(&head, &pool_and_flatten(f.view(), &spec).unwrap(), &targets, &spec, dropout_seed);
        let numeric = (up - down) / (2.0 * H);
        assert!(relative_error(dfeatures[idx], numeric) < 1e-4);
    }
    eprintln!("worst relative error {worst:e} over {checked} parameters");
}

#[test]
fn inference_mode_gradients_match_finite_differences() {
    check(None);
}

#[test]
fn gradients_with_a_fixed_dropout_mask_match_finite_differences() {
    check(Some(99));
}
