//! Analysis quantities computed with oracle labels: the pseudo-label ledger,
//! signal scarcity, error drift and calibration.
//!
//! Everything here only reads the model and the pool. Oracle labels of
//! unlabeled samples are reachable only through [`OracleKey`], which this
//! module alone can mint, so training code cannot consume them by accident.

use crate::data::{Augment, DataPool, DiscreteFamily};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{confidence_from_probs, ModelState};
use crate::numerics::{Matrix, Rng};

/// Capability token for reading oracle labels of unlabeled samples.
#[derive(Debug)]
pub struct OracleKey {
    _private: (),
}

impl OracleKey {
    pub(crate) fn new() -> Self {
        Self { _private: () }
    }
}

/// Held-out samples drawn from the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn draw(pool: &DataPool, per_class: usize, rng: &mut Rng) -> Result<Self> {
        let (x, labels) = pool.draw_fresh(per_class, rng)?;
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Top-1 accuracy of argmax predictions; 0 on an empty set.
pub fn accuracy(state: &ModelState, set: &EvalSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let pred = state.forward(&set.x)?.class_probs.argmax_rows();
    let hits = pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LedgerCounts {
    pub confident_correct: usize,
    pub confident_incorrect: usize,
    pub unconfident: usize,
}

impl LedgerCounts {
    pub fn total(&self) -> usize {
        self.confident_correct + self.confident_incorrect + self.unconfident
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRecord {
    pub epoch: usize,
    pub counts: LedgerCounts,
    pub confident_correct: f64,
    pub confident_incorrect: f64,
    pub unconfident: f64,
    pub test_accuracy: f64,
    pub tau_c: Vec<f64>,
    /// Filled in by the caller; per-epoch means of the training losses.
    pub losses: LossBreakdown,
}

/// Bins every unlabeled sample, under `draws` weak augmentations each, as
/// confident-correct, confident-incorrect or unconfident, and measures test
/// accuracy on `test`.
pub fn ledger(
    state: &ModelState,
    pool: &DataPool,
    thresholds: &[f64],
    weak: &impl Augment,
    rng: &mut Rng,
    test: &EvalSet,
    draws: usize,
) -> Result<LedgerRecord> {
    let oracle = pool.oracle_labels(&OracleKey::new());
    let ids = pool.unlabeled_ids();
    let x_u = pool.features().select_rows(ids);
    let mut counts = LedgerCounts::default();
    for _ in 0..draws {
        let xw = weak.augment_rows(&x_u, rng);
        let gates = confidence_from_probs(&state.forward(&xw)?.class_probs, thresholds)?;
        for (g, &id) in gates.iter().zip(ids) {
            match (g.gate, g.label == oracle[id]) {
                (true, true) => counts.confident_correct += 1,
                (true, false) => counts.confident_incorrect += 1,
                (false, _) => counts.unconfident += 1,
            }
        }
    }
    let total = counts.total().max(1) as f64;
    Ok(LedgerRecord {
        epoch: 0,
        counts,
        confident_correct: counts.confident_correct as f64 / total,
        confident_incorrect: counts.confident_incorrect as f64 / total,
        unconfident: counts.unconfident as f64 / total,
        test_accuracy: accuracy(state, test)?,
        tau_c: thresholds.to_vec(),
        losses: LossBreakdown::default(),
    })
}

fn max_probs(state: &ModelState, x: &Matrix) -> Result<Vec<f64>> {
    Ok(state
        .forward(x)?
        .class_probs
        .row_iter()
        .map(|r| r.iter().cloned().fold(0.0, f64::max))
        .collect())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// Monte-Carlo estimate of the fraction of (unlabeled sample, weak draw)
/// pairs whose max probability stays below `tau`.
pub fn signal_scarcity(
    state: &ModelState,
    pool: &DataPool,
    tau: f64,
    weak: &impl Augment,
    rng: &mut Rng,
    n_draws: usize,
) -> Result<f64> {
    Ok(signal_scarcity_curve(state, pool, &[tau], weak, rng, n_draws)?[0])
}

/// [`signal_scarcity`] at several thresholds over one shared set of draws.
pub fn signal_scarcity_curve(
    state: &ModelState,
    pool: &DataPool,
    taus: &[f64],
    weak: &impl Augment,
    rng: &mut Rng,
    n_draws: usize,
) -> Result<Vec<f64>> {
    for &t in taus {
        check_tau(t)?;
    }
    let x_u = pool.features().select_rows(pool.unlabeled_ids());
    let mut maxes = Vec::with_capacity(x_u.rows() * n_draws);
    for _ in 0..n_draws {
        maxes.extend(max_probs(state, &weak.augment_rows(&x_u, rng))?);
    }
    let n = maxes.len().max(1) as f64;
    Ok(taus
        .iter()
        .map(|&t| maxes.iter().filter(|&&m| m < t).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftEstimate {
    pub p_event: f64,
    pub n_draws: usize,
}

fn confident_error(state: &ModelState, views: &Matrix, label: usize, tau: f64) -> Result<usize> {
    let probs = state.forward(views)?.class_probs;
    let pred = probs.argmax_rows();
    Ok(pred
        .iter()
        .enumerate()
        .filter(|&(i, &p)| probs.get(i, p) >= tau && p != label)
        .count())
}

/// Fraction of weak views of `x` that are confidently misclassified.
pub fn error_drift_rate(
    state: &ModelState,
    x: &[f64],
    label: usize,
    tau: f64,
    weak: &impl Augment,
    rng: &mut Rng,
    n_draws: usize,
) -> Result<DriftEstimate> {
    check_tau(tau)?;
    if n_draws == 0 {
        return Ok(DriftEstimate { p_event: 0.0, n_draws });
    }
    let base = Matrix::row_vector(x);
    let rows: Vec<Vec<f64>> = (0..n_draws)
        .map(|_| weak.sample_op(x.len(), rng).apply_row(base.row(0)))
        .collect();
    let events = confident_error(state, &Matrix::from_rows(&rows)?, label, tau)?;
    Ok(DriftEstimate {
        p_event: events as f64 / n_draws as f64,
        n_draws,
    })
}

/// Exact error-drift probability when the weak family is a finite set of
/// equally likely ops.
pub fn error_drift_exact(
    state: &ModelState,
    x: &[f64],
    label: usize,
    tau: f64,
    family: &DiscreteFamily,
) -> Result<f64> {
    check_tau(tau)?;
    if family.ops.is_empty() {
        return Err(Error::Contract("empty augmentation family".into()));
    }
    let rows: Vec<Vec<f64>> = family.ops.iter().map(|op| op.apply_row(x)).collect();
    let events = confident_error(state, &Matrix::from_rows(&rows)?, label, tau)?;
    Ok(events as f64 / family.ops.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width confidence bins over `[0, 1]`; confidence 1 falls in the last.
pub fn calibration_bins(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    if probs.rows() == 0 {
        return Err(Error::Contract("calibration on an empty set".into()));
    }
    if labels.len() != probs.rows() {
        return Err(Error::shape(
            "calibration_bins",
            format!("{} labels for {} rows", labels.len(), probs.rows()),
        ));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (r, (&y, p)) in labels.iter().zip(probs.argmax_rows()).enumerate() {
        let conf = probs.get(r, p);
        let b = ((conf * n_bins as f64) as usize).min(n_bins - 1);
        counts[b] += 1;
        conf_sum[b] += conf;
        hits[b] += usize::from(p == y);
    }
    Ok((0..n_bins)
        .map(|b| {
            if counts[b] == 0 {
                return CalibrationBin::default();
            }
            let n = counts[b] as f64;
            CalibrationBin {
                count: counts[b],
                mean_confidence: conf_sum[b] / n,
                accuracy: hits[b] as f64 / n,
            }
        })
        .collect())
}

/// Mass-weighted mean of `|accuracy - confidence|` over bins.
pub fn calibration_gap_from_probs(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    let bins = calibration_bins(probs, labels, n_bins)?;
    let n = probs.rows() as f64;
    Ok(bins
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

pub fn calibration_gap(state: &ModelState, set: &EvalSet, n_bins: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("calibration on an empty set".into()));
    }
    calibration_gap_from_probs(&state.forward(&set.x)?.class_probs, &set.labels, n_bins)
}
