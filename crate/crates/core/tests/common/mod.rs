#![allow(dead_code)]

use lesslab::model::{ModelSpec, ModelState, Params, SgdConfig};
use lesslab::numerics::{Matrix, Rng};

pub fn small_spec() -> ModelSpec {
    ModelSpec {
        input_dim: 4,
        hidden: vec![12, 10],
        num_classes: 3,
        proj_dim: 5,
        num_prototypes: 6,
        temp_proto: 0.1,
    }
}

pub fn random_model(spec: &ModelSpec, seed: u64) -> ModelState {
    ModelState::init(spec.clone(), SgdConfig::default(), &mut Rng::new(seed)).unwrap()
}

pub fn random_rows(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Central differences of `f` with respect to every parameter of `state`.
pub fn fd_params(state: &ModelState, h: f64, f: impl Fn(&ModelState) -> f64) -> Params {
    let mut probe = state.clone();
    let mut grad = state.params.zeros_like();
    let tensors = state.params.named().len();
    for t in 0..tensors {
        let len = state.params.named()[t].1.len();
        for e in 0..len {
            let orig = probe.params.named()[t].1.as_slice()[e];
            probe.params.named_mut()[t].1.as_mut_slice()[e] = orig + h;
            let up = f(&probe);
            probe.params.named_mut()[t].1.as_mut_slice()[e] = orig - h;
            let down = f(&probe);
            probe.params.named_mut()[t].1.as_mut_slice()[e] = orig;
            grad.named_mut()[t].1.as_mut_slice()[e] = (up - down) / (2.0 * h);
        }
    }
    grad
}

/// `|a - b| / max(|a|, |b|)` over the flattened parameter vectors; 0 when
/// both vanish.
pub fn params_rel_err(a: &Params, b: &Params) -> f64 {
    let (x, y) = (a.flatten(), b.flatten());
    let diff: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
    let scale = norm(&x).max(norm(&y));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Thresholds at the median weak-view max probability, so about half the
/// rows are gated.
pub fn median_thresholds(state: &ModelState, x_w: &Matrix) -> Vec<f64> {
    let probs = state.forward(x_w).unwrap().class_probs;
    let mut maxes: Vec<f64> = probs
        .row_iter()
        .map(|r| r.iter().cloned().fold(0.0, f64::max))
        .collect();
    maxes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vec![maxes[maxes.len() / 2]; state.num_classes()]
}
