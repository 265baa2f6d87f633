//! Training objectives.
//!
//! Every loss comes with its parameter gradients. Targets (pseudo-labels from
//! the weak view and Sinkhorn assignments) are computed first by
//! [`unlabeled_targets`] under stop-gradient, then [`unlabeled_loss_with_targets`]
//! differentiates the loss with those targets held fixed. Keeping the two
//! phases separate is what makes the finite-difference checks possible.

use crate::assign::{sinkhorn_knopp, SinkhornConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{confidence_from_probs, Confidence, ModelState, Params};
use crate::numerics::{log_softmax_rows, log_softmax_rows_backward, Matrix};

/// Probabilities are floored at this value inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the unlabeled term in the total objective.
    pub lambda_u: f64,
    pub sinkhorn: SinkhornConfig,
    /// Halve the symmetric swapped cross-entropy so it matches one CE in scale.
    pub halve_coreg: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            sinkhorn: SinkhornConfig::default(),
            halve_coreg: true,
        }
    }
}

/// How unlabeled samples are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnlabeledMode {
    /// Confident samples get a pseudo-label; the rest contribute nothing.
    Distill,
    /// Every sample gets the clustering consistency term.
    Coreg,
    /// Confident samples get a pseudo-label, the rest the consistency term.
    Composite,
}

/// Which per-sample term a given unlabeled row contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Distill { label: usize },
    /// Row index into the Sinkhorn targets.
    Coreg { slot: usize },
    Masked,
}

/// Stop-gradient targets for one unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledTargets {
    pub gates: Vec<Confidence>,
    pub branches: Vec<Branch>,
    /// Batch rows on the consistency branch, in order.
    pub coreg_rows: Vec<usize>,
    /// Balanced assignments of the weak / strong views of `coreg_rows`.
    pub qa_weak: Matrix,
    pub qa_strong: Matrix,
}

impl UnlabeledTargets {
    pub fn gated_count(&self) -> usize {
        self.gates.iter().filter(|c| c.gate).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub supervised: f64,
    /// Sum of per-sample pseudo-label terms over B_u.
    pub distill: f64,
    /// Sum of per-sample consistency terms over B_u.
    pub coreg: f64,
    /// `distill + coreg`.
    pub composite: f64,
    pub gated_count: usize,
    pub coreg_count: usize,
    pub total: f64,
}

/// One unlabeled row's contribution (before dividing by B_u).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTerm {
    pub branch: Branch,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct UnlabeledOutput {
    pub distill: f64,
    pub coreg: f64,
    pub per_sample: Vec<SampleTerm>,
    pub grads: Params,
    pub gates: Vec<Confidence>,
    /// Consistency rows exist but every swapped prediction already equals its
    /// target, so their gradient vanishes.
    pub degenerate: bool,
}

impl UnlabeledOutput {
    pub fn composite(&self) -> f64 {
        self.distill + self.coreg
    }

    pub fn gated_count(&self) -> usize {
        self.gates.iter().filter(|c| c.gate).count()
    }

    pub fn coreg_count(&self) -> usize {
        self.per_sample
            .iter()
            .filter(|t| matches!(t.branch, Branch::Coreg { .. }))
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: Params,
    /// Weak-view gates of the unlabeled rows (empty without unlabeled data).
    pub gates: Vec<Confidence>,
}

/// Log-probabilities floored at `ln(LOG_FLOOR)`, plus the mask of entries
/// that were not floored (only those carry gradient).
fn floored_log_probs(logits: &Matrix) -> (Matrix, Vec<bool>) {
    let floor = LOG_FLOOR.ln();
    let lp = log_softmax_rows(logits);
    let live = lp.as_slice().iter().map(|&v| v >= floor).collect();
    (lp.map(|v| v.max(floor)), live)
}

fn mask_grad(g: &mut Matrix, live: &[bool]) {
    for (v, &ok) in g.as_mut_slice().iter_mut().zip(live) {
        if !ok {
            *v = 0.0;
        }
    }
}

/// Mean negative log-likelihood of `labels` and its parameter gradients.
pub fn l_supervised(state: &ModelState, x: &Matrix, labels: &[usize]) -> Result<(f64, Params)> {
    if labels.len() != x.rows() {
        return Err(Error::shape(
            "l_supervised",
            format!("{} labels for {} rows", labels.len(), x.rows()),
        ));
    }
    let k = state.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    if x.rows() == 0 {
        return Ok((0.0, state.params.zeros_like()));
    }
    let n = x.rows() as f64;
    let cache = state.forward_cached(x)?;
    let (lp, live) = floored_log_probs(&cache.out.class_logits);
    let mut loss = 0.0;
    let mut d_lp = Matrix::zeros(x.rows(), k);
    for (i, &y) in labels.iter().enumerate() {
        loss -= lp.get(i, y);
        d_lp.set(i, y, -1.0 / n);
    }
    mask_grad(&mut d_lp, &live);
    let d_logits = log_softmax_rows_backward(&cache.out.class_probs, &d_lp)?;
    let grads = state.backward(&cache, Some(&d_logits), None)?;
    Ok((loss / n, grads))
}

/// Computes gates from the weak view and, for rows on the consistency
/// branch, Sinkhorn targets for both views. Nothing here is differentiated.
pub fn unlabeled_targets(
    state: &ModelState,
    x_w: &Matrix,
    x_s: &Matrix,
    thresholds: &[f64],
    mode: UnlabeledMode,
    cfg: &LossConfig,
) -> Result<UnlabeledTargets> {
    if x_w.shape() != x_s.shape() {
        return Err(Error::shape(
            "unlabeled_targets",
            format!("weak {:?} vs strong {:?}", x_w.shape(), x_s.shape()),
        ));
    }
    let weak = state.forward(x_w)?;
    let gates = confidence_from_probs(&weak.class_probs, thresholds)?;
    let mut branches = Vec::with_capacity(gates.len());
    let mut coreg_rows = Vec::new();
    for (i, c) in gates.iter().enumerate() {
        let b = match (mode, c.gate) {
            (UnlabeledMode::Distill, true) | (UnlabeledMode::Composite, true) => {
                Branch::Distill { label: c.label }
            }
            (UnlabeledMode::Distill, false) => Branch::Masked,
            (UnlabeledMode::Coreg, _) | (UnlabeledMode::Composite, false) => {
                coreg_rows.push(i);
                Branch::Coreg {
                    slot: coreg_rows.len() - 1,
                }
            }
        };
        branches.push(b);
    }
    let k = state.spec().num_prototypes;
    let (qa_weak, qa_strong) = if coreg_rows.is_empty() {
        (Matrix::zeros(0, k), Matrix::zeros(0, k))
    } else {
        let strong = state.forward(&x_s.select_rows(&coreg_rows))?;
        let sw = weak.proto_similarity.select_rows(&coreg_rows);
        let SinkhornConfig { eps, iters } = cfg.sinkhorn;
        (
            sinkhorn_knopp(&sw, eps, iters)?.q,
            sinkhorn_knopp(&strong.proto_similarity, eps, iters)?.q,
        )
    };
    Ok(UnlabeledTargets {
        gates,
        branches,
        coreg_rows,
        qa_weak,
        qa_strong,
    })
}

/// Unlabeled loss and gradients with `targets` held fixed.
pub fn unlabeled_loss_with_targets(
    state: &ModelState,
    x_w: &Matrix,
    x_s: &Matrix,
    targets: &UnlabeledTargets,
    cfg: &LossConfig,
) -> Result<UnlabeledOutput> {
    let b_u = x_s.rows();
    if targets.branches.len() != b_u || x_w.shape() != x_s.shape() {
        return Err(Error::shape(
            "unlabeled_loss_with_targets",
            format!("{} targets for {b_u} rows", targets.branches.len()),
        ));
    }
    let mut per_sample: Vec<SampleTerm> = targets
        .branches
        .iter()
        .map(|&branch| SampleTerm { branch, value: 0.0 })
        .collect();
    let any_distill = targets
        .branches
        .iter()
        .any(|b| matches!(b, Branch::Distill { .. }));
    let any_coreg = !targets.coreg_rows.is_empty();
    if !any_distill && !any_coreg {
        return Ok(UnlabeledOutput {
            distill: 0.0,
            coreg: 0.0,
            per_sample,
            grads: state.params.zeros_like(),
            gates: targets.gates.clone(),
            degenerate: false,
        });
    }

    let inv_b = 1.0 / b_u as f64;
    let half = if cfg.halve_coreg { 0.5 } else { 1.0 };
    let strong = state.forward_cached(x_s)?;
    let mut distill_sum = 0.0;
    let mut coreg_sum = 0.0;
    let mut degenerate = any_coreg;

    let d_logits_s = if any_distill {
        let (lp, live) = floored_log_probs(&strong.out.class_logits);
        let mut d_lp = Matrix::zeros(b_u, state.num_classes());
        for (i, t) in per_sample.iter_mut().enumerate() {
            if let Branch::Distill { label } = t.branch {
                t.value = -lp.get(i, label);
                distill_sum += t.value;
                d_lp.set(i, label, -inv_b);
            }
        }
        mask_grad(&mut d_lp, &live);
        Some(log_softmax_rows_backward(&strong.out.class_probs, &d_lp)?)
    } else {
        None
    };

    let mut grads;
    if any_coreg {
        let weak = state.forward_cached(x_w)?;
        let k = state.spec().num_prototypes;
        let (lq_s, live_s) = floored_log_probs(&strong.out.proto_scores);
        let (lq_w, live_w) = floored_log_probs(&weak.out.proto_scores);
        let mut d_lq_s = Matrix::zeros(b_u, k);
        let mut d_lq_w = Matrix::zeros(b_u, k);
        for (i, t) in per_sample.iter_mut().enumerate() {
            let Branch::Coreg { slot } = t.branch else {
                continue;
            };
            let qa_w = targets.qa_weak.row(slot);
            let qa_s = targets.qa_strong.row(slot);
            let mut v = 0.0;
            for j in 0..k {
                v += qa_w[j] * lq_s.get(i, j) + qa_s[j] * lq_w.get(i, j);
                d_lq_s.set(i, j, -half * inv_b * qa_w[j]);
                d_lq_w.set(i, j, -half * inv_b * qa_s[j]);
                let qs = strong.out.proto_probs.get(i, j);
                let qw = weak.out.proto_probs.get(i, j);
                if (qs - qa_w[j]).abs() > 1e-12 || (qw - qa_s[j]).abs() > 1e-12 {
                    degenerate = false;
                }
            }
            t.value = -half * v;
            coreg_sum += t.value;
        }
        mask_grad(&mut d_lq_s, &live_s);
        mask_grad(&mut d_lq_w, &live_w);
        let d_scores_s = log_softmax_rows_backward(&strong.out.proto_probs, &d_lq_s)?;
        let d_scores_w = log_softmax_rows_backward(&weak.out.proto_probs, &d_lq_w)?;
        grads = state.backward(&strong, d_logits_s.as_ref(), Some(&d_scores_s))?;
        let gw = state.backward(&weak, None, Some(&d_scores_w))?;
        grads.add_scaled(&gw, 1.0)?;
    } else {
        grads = state.backward(&strong, d_logits_s.as_ref(), None)?;
    }

    Ok(UnlabeledOutput {
        distill: distill_sum * inv_b,
        coreg: coreg_sum * inv_b,
        per_sample,
        grads,
        gates: targets.gates.clone(),
        degenerate,
    })
}

/// Targets then loss for one unlabeled batch.
pub fn unlabeled_objective(
    state: &ModelState,
    x_w: &Matrix,
    x_s: &Matrix,
    thresholds: &[f64],
    mode: UnlabeledMode,
    cfg: &LossConfig,
) -> Result<UnlabeledOutput> {
    let targets = unlabeled_targets(state, x_w, x_s, thresholds, mode, cfg)?;
    unlabeled_loss_with_targets(state, x_w, x_s, &targets, cfg)
}

/// Pseudo-label distillation: cross-entropy of the strong view against the
/// weak view's confident argmax, zero for unconfident rows.
pub fn l_distill(
    state: &ModelState,
    x_w: &Matrix,
    x_s: &Matrix,
    thresholds: &[f64],
    cfg: &LossConfig,
) -> Result<UnlabeledOutput> {
    unlabeled_objective(state, x_w, x_s, thresholds, UnlabeledMode::Distill, cfg)
}

/// Symmetric swapped-assignment cross-entropy between two views.
pub fn l_coreg(state: &ModelState, x_u: &Matrix, x_v: &Matrix, cfg: &LossConfig) -> Result<UnlabeledOutput> {
    // gates are irrelevant in this mode; any threshold vector of the right length will do
    let thresholds = vec![1.0; state.num_classes()];
    unlabeled_objective(state, x_u, x_v, &thresholds, UnlabeledMode::Coreg, cfg)
}

/// Gated composite: distillation for confident rows, consistency otherwise.
pub fn l_composite(
    state: &ModelState,
    x_w: &Matrix,
    x_s: &Matrix,
    thresholds: &[f64],
    cfg: &LossConfig,
) -> Result<UnlabeledOutput> {
    unlabeled_objective(state, x_w, x_s, thresholds, UnlabeledMode::Composite, cfg)
}

/// Which terms enter the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub supervised: bool,
    pub unlabeled: Option<UnlabeledMode>,
}

/// `supervised + lambda_u * unlabeled` with gradients accumulated in one pass.
pub fn total_objective(
    state: &ModelState,
    batch: &Batch,
    thresholds: &[f64],
    objective: Objective,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let mut breakdown = LossBreakdown::default();
    let mut grads = state.params.zeros_like();
    if objective.supervised {
        let (sup, g) = l_supervised(state, &batch.labeled.x, &batch.labeled.labels)?;
        breakdown.supervised = sup;
        grads = g;
    }
    let mut gates = Vec::new();
    let u = &batch.unlabeled;
    if let Some(mode) = objective.unlabeled.filter(|_| u.ids.len() > 0) {
        let out = unlabeled_objective(state, &u.weak, &u.strong, thresholds, mode, cfg)?;
        breakdown.distill = out.distill;
        breakdown.coreg = out.coreg;
        breakdown.composite = out.composite();
        breakdown.gated_count = out.gated_count();
        breakdown.coreg_count = out.coreg_count();
        let active = out
            .per_sample
            .iter()
            .any(|t| !matches!(t.branch, Branch::Masked));
        if active && cfg.lambda_u != 0.0 {
            grads.add_scaled(&out.grads, cfg.lambda_u)?;
        }
        gates = out.gates;
    }
    breakdown.total = breakdown.supervised + cfg.lambda_u * breakdown.composite;
    Ok(LossOutput {
        breakdown,
        grads,
        gates,
    })
}
