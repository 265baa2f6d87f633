mod common;

use common::{fd_params, median_thresholds, params_rel_err, random_model, random_rows, small_spec};
use lesslab::losses::{l_supervised, unlabeled_loss_with_targets, unlabeled_targets, LossConfig, UnlabeledMode};
use lesslab::numerics::Rng;

fn check_mode(mode: UnlabeledMode, seed: u64) -> f64 {
    let spec = small_spec();
    let m = random_model(&spec, seed);
    let mut rng = Rng::new(seed + 1000);
    let x_w = random_rows(&mut rng, 8, spec.input_dim, 1.0);
    let x_s = x_w.add(&random_rows(&mut rng, 8, spec.input_dim, 0.3)).unwrap();
    let tau = median_thresholds(&m, &x_w);
    let cfg = LossConfig::default();
    let targets = unlabeled_targets(&m, &x_w, &x_s, &tau, mode, &cfg).unwrap();
    let out = unlabeled_loss_with_targets(&m, &x_w, &x_s, &targets, &cfg).unwrap();
    let fd = fd_params(&m, 1e-6, |s| {
        unlabeled_loss_with_targets(s, &x_w, &x_s, &targets, &cfg).unwrap().composite()
    });
    params_rel_err(&out.grads, &fd)
}

#[test]
fn supervised_matches_central_differences() {
    let spec = small_spec();
    for seed in 0..3 {
        let m = random_model(&spec, seed);
        let mut rng = Rng::new(seed);
        let x = random_rows(&mut rng, 5, spec.input_dim, 1.0);
        let labels = vec![0, 1, 2, 1, 0];
        let (_, g) = l_supervised(&m, &x, &labels).unwrap();
        let fd = fd_params(&m, 1e-6, |s| l_supervised(s, &x, &labels).unwrap().0);
        assert!(params_rel_err(&g, &fd) < 1e-6);
    }
}

#[test]
fn distill_frozen_targets() {
    for seed in 0..3 {
        assert!(check_mode(UnlabeledMode::Distill, seed) < 1e-6);
    }
}

#[test]
fn coreg_frozen_assignments() {
    for seed in 0..3 {
        assert!(check_mode(UnlabeledMode::Coreg, seed) < 1e-6);
    }
}

#[test]
fn composite_mixed_gates() {
    for seed in 0..3 {
        assert!(check_mode(UnlabeledMode::Composite, seed) < 1e-6);
    }
}

#[test]
fn loss_is_finite_for_large_logits() {
    let spec = small_spec();
    let mut m = random_model(&spec, 9);
    m.params.class_head.weight = m.params.class_head.weight.scale(1e4);
    let mut rng = Rng::new(9);
    let x = random_rows(&mut rng, 6, spec.input_dim, 3.0);
    let (loss, g) = l_supervised(&m, &x, &[0, 1, 2, 0, 1, 2]).unwrap();
    assert!(loss.is_finite());
    assert!(g.flatten().iter().all(|v| v.is_finite()));
}
