//! Experiment orchestration: one training run, tau sweeps and reports.
//!
//! A run owns all of its mutable state and is strictly sequential. Separate
//! runs share nothing, which is what lets [`sweep_tau`] run them in parallel.

mod config;
mod metrics;
mod sweep;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, LrSchedule, Method, Toggle, KEYS};
pub use metrics::{
    emit_csv, emit_summary, fmt_sig, header, read_csv, read_summary, render_csv, MetricsRow, RunSummary,
    FIXED_COLUMNS,
};
pub use sweep::{report, sweep_tau, unbiased_std, worker_threads, SweepTable};

use crate::data::{generate_blobs, sample_batch, split_barely, AugmentationFamily, DataPool};
use crate::diagnostics::{accuracy, ledger, EvalSet};
use crate::error::{Error, Result};
use crate::losses::{total_objective, LossBreakdown};
use crate::model::{save_checkpoint, ModelState};
use crate::numerics::Rng;
use crate::refine::{confident_counts, epoch_end_promote, PredictionHistory, ThresholdState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
    pub model: ModelState,
    pub thresholds: ThresholdState,
    pub pool: DataPool,
}

/// Seeded random streams of one run.
struct Streams {
    data: Rng,
    split: Rng,
    init: Rng,
    batch: Rng,
    ledger: Rng,
    test: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            data: root.split("data"),
            split: root.split("split"),
            init: root.split("init"),
            batch: root.split("batch"),
            ledger: root.split("ledger"),
            test: root.split("test"),
        }
    }
}

pub fn steps_per_epoch(cfg: &ExperimentConfig, unlabeled: usize) -> usize {
    cfg.steps_per_epoch
        .unwrap_or_else(|| unlabeled.div_ceil(cfg.mu_ratio * cfg.b_s).max(1))
}

fn learning_rate(cfg: &ExperimentConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.sgd.lr,
        LrSchedule::Cosine => {
            let t = step as f64 / total.max(1) as f64;
            cfg.sgd.lr * (7.0 * std::f64::consts::PI * t / 16.0).cos()
        }
    }
}

#[derive(Default)]
struct EpochMeans {
    sum: LossBreakdown,
    gated: f64,
    steps: usize,
}

impl EpochMeans {
    fn add(&mut self, b: &LossBreakdown, b_u: usize) {
        self.sum.supervised += b.supervised;
        self.sum.distill += b.distill;
        self.sum.coreg += b.coreg;
        self.sum.composite += b.composite;
        self.sum.total += b.total;
        self.gated += b.gated_count as f64 / b_u.max(1) as f64;
        self.steps += 1;
    }

    fn mean(&self) -> (LossBreakdown, f64) {
        let n = self.steps.max(1) as f64;
        let s = &self.sum;
        (
            LossBreakdown {
                supervised: s.supervised / n,
                distill: s.distill / n,
                coreg: s.coreg / n,
                composite: s.composite / n,
                total: s.total / n,
                ..LossBreakdown::default()
            },
            self.gated / n,
        )
    }
}

/// Trains one configuration and writes `metrics.csv`, `summary.txt`,
/// `config.txt` and `checkpoint.bin` under `cfg.output`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let out_dir = cfg.output.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_kv()).map_err(|e| Error::io(&config_path, e))?;

    let mut rng = Streams::new(cfg.seed);
    let pool = generate_blobs(&cfg.data, &mut rng.data)?;
    let mut pool = split_barely(pool, cfg.labels_per_class, &mut rng.split)?;
    let test = EvalSet::draw(&pool, cfg.test_per_class, &mut rng.test)?;
    let mut model = ModelState::init(cfg.model.clone(), cfg.sgd.clone(), &mut rng.init)?;
    let weak = AugmentationFamily::weak(cfg.weak_sigma)?;
    let strong = AugmentationFamily::strong(cfg.strong_sigma, cfg.strong_mask, cfg.strong_jitter)?;

    let mut thresholds = ThresholdState::new(cfg.tau_init(), pool.class_priors().to_vec())?;
    thresholds.alpha = cfg.alpha;
    thresholds.epsilon = cfg.epsilon;
    thresholds.tau_min = cfg.tau_min;
    thresholds.tau_max = cfg.tau_max;
    let mut history = PredictionHistory::for_pool(&pool, &cfg.refiner);
    let adaptive = cfg.adaptive_enabled();
    let refine = cfg.refine_enabled();
    let k = cfg.num_classes();

    let per_epoch = steps_per_epoch(cfg, pool.unlabeled_ids().len());
    let total_steps = per_epoch * cfg.epochs;
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut last_good: Option<PathBuf> = None;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let objective = cfg.method.objective(epoch, cfg.pretrain_epochs);
        let mut means = EpochMeans::default();
        for _ in 0..per_epoch {
            let batch = sample_batch(&pool, cfg.b_s, cfg.mu_ratio, &weak, &strong, &mut rng.batch)?;
            let out = total_objective(&model, &batch, &thresholds.tau_c, objective, &cfg.loss)?;
            let b_u = batch.unlabeled.ids.len();
            let abort = |detail: String| Error::NumericAbort {
                epoch,
                step,
                detail,
                checkpoint: last_good.clone(),
            };
            if !out.breakdown.total.is_finite() {
                return Err(abort(format!("loss is {}", out.breakdown.total)));
            }
            model.sgd.lr = learning_rate(cfg, step, total_steps);
            model.sgd_step(&out.grads).map_err(|e| match e {
                Error::Numeric(d) => abort(d),
                other => other,
            })?;
            step += 1;
            if adaptive {
                thresholds.update(&confident_counts(&out.gates, k), b_u)?;
            }
            history.record_batch(&batch.unlabeled.ids, &out.gates)?;
            means.add(&out.breakdown, b_u);
        }

        if refine {
            epoch_end_promote(&history, &cfg.refiner, &mut pool)?;
        }
        let rec = ledger(
            &model,
            &pool,
            &thresholds.tau_c,
            &weak,
            &mut rng.ledger,
            &test,
            cfg.ledger_draws,
        )?;
        save_checkpoint(&model, &ckpt_path)?;
        last_good = Some(ckpt_path.clone());
        let (loss, gated_frac) = means.mean();
        rows.push(MetricsRow {
            epoch: epoch + 1,
            step,
            method: cfg.method.to_string(),
            seed: cfg.seed,
            loss_sup: loss.supervised,
            loss_distill: loss.distill,
            loss_coreg: loss.coreg,
            loss_total: loss.total,
            gated_frac,
            conf_correct: rec.confident_correct,
            conf_incorrect: rec.confident_incorrect,
            unconf: rec.unconfident,
            test_acc: rec.test_accuracy,
            promoted_total: pool.promoted().len(),
            tau_c: thresholds.tau_c.clone(),
            p_c: thresholds.p_c.clone(),
        });
        // rewritten every epoch so an aborted run still leaves its history
        emit_csv(&rows, k, &metrics_path)?;
    }
    if rows.is_empty() {
        emit_csv(&rows, k, &metrics_path)?;
    }

    let final_test_acc = match rows.last() {
        Some(r) => r.test_acc,
        None => accuracy(&model, &test)?,
    };
    let window = &rows[rows.len().saturating_sub(cfg.last_k)..];
    let mean_last_k_test_acc = if window.is_empty() {
        final_test_acc
    } else {
        window.iter().map(|r| r.test_acc).sum::<f64>() / window.len() as f64
    };
    let summary = RunSummary {
        method: cfg.method.to_string(),
        seed: cfg.seed,
        tau: cfg.tau.clone(),
        epochs: cfg.epochs,
        steps: step,
        final_test_acc,
        mean_last_k_test_acc,
        last_k: cfg.last_k,
        promoted_total: pool.promoted().len(),
        metrics_path: metrics_path.clone(),
        checkpoint_path: last_good,
    };
    emit_summary(&summary, &out_dir.join(SUMMARY_FILE))?;
    Ok(RunOutcome {
        summary,
        rows,
        model,
        thresholds,
        pool,
    })
}

/// Reads a config file, applies `key=value` overrides and runs it.
pub fn run_file(path: &Path, overrides: &[String]) -> Result<RunOutcome> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    apply_overrides(&mut cfg, overrides)?;
    run(&cfg)
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}
