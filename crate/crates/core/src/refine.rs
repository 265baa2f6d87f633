//! Pseudo-label quality control: adaptive per-class thresholds and
//! history-based promotion of unlabeled samples.

use std::collections::{BTreeMap, VecDeque};

use crate::data::DataPool;
use crate::error::{Error, Result};
use crate::model::Confidence;

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub tau_c: Vec<f64>,
    pub p_c: Vec<f64>,
    pub r_c: Vec<f64>,
    pub alpha: f64,
    pub epsilon: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl ThresholdState {
    /// `p_c` starts at the prior, so the first update moves `tau_c` only if
    /// the batch disagrees with it.
    pub fn new(tau_init: Vec<f64>, priors: Vec<f64>) -> Result<Self> {
        if tau_init.len() != priors.len() || tau_init.is_empty() {
            return Err(Error::Config(format!(
                "{} thresholds for {} classes",
                tau_init.len(),
                priors.len()
            )));
        }
        if tau_init.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        Ok(Self {
            tau_c: tau_init,
            p_c: priors.clone(),
            r_c: priors,
            alpha: 0.9,
            epsilon: 0.001,
            tau_min: 0.6,
            tau_max: 0.9999,
        })
    }

    pub fn constant(tau: f64, priors: Vec<f64>) -> Result<Self> {
        Self::new(vec![tau; priors.len()], priors)
    }

    pub fn num_classes(&self) -> usize {
        self.tau_c.len()
    }

    /// One controller step from the confident counts of a batch of `b_u`
    /// unlabeled samples. A batch of zero rows leaves the state unchanged.
    pub fn update(&mut self, batch_counts: &[usize], b_u: usize) -> Result<()> {
        if batch_counts.len() != self.num_classes() {
            return Err(Error::shape(
                "update_thresholds",
                format!("{} counts for {} classes", batch_counts.len(), self.num_classes()),
            ));
        }
        let total: usize = batch_counts.iter().sum();
        if total > b_u {
            return Err(Error::Contract(format!("{total} confident rows in a batch of {b_u}")));
        }
        if b_u == 0 {
            return Ok(());
        }
        for c in 0..self.num_classes() {
            let frac = batch_counts[c] as f64 / b_u as f64;
            self.p_c[c] = (self.alpha * self.p_c[c] + (1.0 - self.alpha) * frac).clamp(0.0, 1.0);
            let step = match self.p_c[c].partial_cmp(&self.r_c[c]) {
                Some(std::cmp::Ordering::Greater) => self.epsilon,
                Some(std::cmp::Ordering::Less) => -self.epsilon,
                _ => 0.0,
            };
            self.tau_c[c] = (self.tau_c[c] + step).clamp(self.tau_min, self.tau_max);
        }
        Ok(())
    }
}

/// Functional form of [`ThresholdState::update`].
pub fn update_thresholds(ts: &ThresholdState, batch_counts: &[usize], b_u: usize) -> Result<ThresholdState> {
    let mut next = ts.clone();
    next.update(batch_counts, b_u)?;
    Ok(next)
}

/// Per-class number of gated rows.
pub fn confident_counts(gates: &[Confidence], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for g in gates.iter().filter(|g| g.gate) {
        counts[g.label] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub n_min: usize,
    pub lambda: f64,
    pub n_cap: usize,
    /// Re-test promoted samples each epoch and drop those that fail.
    pub revoke: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            n_min: 30,
            lambda: 0.95,
            n_cap: 64,
            revoke: false,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 30 {
            return Err(Error::Config(format!("n_min must be at least 30, got {}", self.n_min)));
        }
        if !(self.lambda > 0.5 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0.5, 1), got {}", self.lambda)));
        }
        if self.n_cap < self.n_min {
            return Err(Error::Config(format!(
                "n_cap {} is below n_min {}",
                self.n_cap, self.n_min
            )));
        }
        Ok(())
    }
}

/// Rolling record of one sample's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    entries: VecDeque<(usize, bool)>,
    counts: Vec<usize>,
    cap: usize,
}

impl History {
    pub fn new(num_classes: usize, cap: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(cap),
            counts: vec![0; num_classes],
            cap,
        }
    }

    pub fn push(&mut self, class: usize, confident: bool) {
        if self.cap == 0 {
            return;
        }
        if self.entries.len() == self.cap {
            let (old, _) = self.entries.pop_front().expect("full buffer");
            self.counts[old] -= 1;
        }
        self.entries.push_back((class, confident));
        self.counts[class] += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.entries.iter().copied()
    }
}

/// Histories for every unlabeled id of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHistory {
    slots: BTreeMap<usize, History>,
    num_classes: usize,
}

impl PredictionHistory {
    pub fn new(ids: &[usize], num_classes: usize, cap: usize) -> Self {
        Self {
            slots: ids.iter().map(|&id| (id, History::new(num_classes, cap))).collect(),
            num_classes,
        }
    }

    pub fn for_pool(pool: &DataPool, cfg: &RefinerConfig) -> Self {
        Self::new(pool.unlabeled_ids(), pool.num_classes(), cfg.n_cap)
    }

    pub fn record(&mut self, id: usize, class: usize, confident: bool) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::Contract(format!("class {class} out of range")));
        }
        let slot = self
            .slots
            .get_mut(&id)
            .ok_or_else(|| Error::Contract(format!("id {id} has no prediction history")))?;
        slot.push(class, confident);
        Ok(())
    }

    /// Records one prediction per row of an unlabeled batch.
    pub fn record_batch(&mut self, ids: &[usize], gates: &[Confidence]) -> Result<()> {
        if ids.len() != gates.len() {
            return Err(Error::shape(
                "record_batch",
                format!("{} ids for {} predictions", ids.len(), gates.len()),
            ));
        }
        for (&id, g) in ids.iter().zip(gates) {
            self.record(id, g.label, g.gate)?;
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&History> {
        self.slots.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &History)> {
        self.slots.iter().map(|(&id, h)| (id, h))
    }
}

/// Append one prediction for `id`.
pub fn record_prediction(h: &mut PredictionHistory, id: usize, predicted_class: usize) -> Result<()> {
    h.record(id, predicted_class, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    pub accept: bool,
    pub class: usize,
    /// `mu_hat - 3 / N`; minus infinity for an empty history.
    pub lower_bound: f64,
    /// More than one class shares the top count.
    pub tied: bool,
}

/// Accepts the majority class when `N >= n_min` and the rule-of-three lower
/// bound `mu_hat - 3/N` reaches `lambda`. Ties never pass.
pub fn rule_of_three_test(h: &History, cfg: &RefinerConfig) -> TestOutcome {
    let n = h.len();
    let counts = h.counts();
    let (class, top) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (c, &k)| if k > best.1 { (c, k) } else { best });
    let tied = n > 0 && counts.iter().filter(|&&k| k == top).count() > 1;
    if n == 0 {
        return TestOutcome {
            accept: false,
            class,
            lower_bound: f64::NEG_INFINITY,
            tied,
        };
    }
    let nf = n as f64;
    let lower_bound = top as f64 / nf - 3.0 / nf;
    TestOutcome {
        accept: !tied && n >= cfg.n_min && lower_bound >= cfg.lambda,
        class,
        lower_bound,
        tied,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromotionReport {
    pub promoted: Vec<(usize, usize)>,
    pub revoked: Vec<(usize, usize)>,
}

/// Promotes every not-yet-promoted id whose history passes the test, in id
/// order. With `revoke`, promoted ids that no longer pass lose their label.
pub fn epoch_end_promote(
    histories: &PredictionHistory,
    cfg: &RefinerConfig,
    pool: &mut DataPool,
) -> Result<PromotionReport> {
    let mut report = PromotionReport::default();
    for (id, h) in histories.iter() {
        let outcome = rule_of_three_test(h, cfg);
        match pool.promoted().get(&id).copied() {
            None if outcome.accept => {
                pool.promote(id, outcome.class)?;
                report.promoted.push((id, outcome.class));
            }
            Some(label) if cfg.revoke && !(outcome.accept && outcome.class == label) => {
                pool.revoke(id);
                report.revoked.push((id, label));
            }
            _ => {}
        }
    }
    Ok(report)
}
