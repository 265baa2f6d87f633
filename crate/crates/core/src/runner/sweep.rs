//! Threshold sweeps over seeds, and aggregation of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::metrics::{fmt_sig, read_summary, RunSummary};
use super::{run, SUMMARY_FILE};
use crate::error::{Error, Result};

/// Sample standard deviation with the `n - 1` denominator; NaN below two
/// values.
pub fn unbiased_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Worker count from `LESSLAB_THREADS`, or `None` for rayon's default.
pub fn worker_threads() -> Result<Option<usize>> {
    match std::env::var("LESSLAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("LESSLAB_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `summaries[t][s]` for `taus[t]` and `seeds[s]`.
    pub summaries: Vec<Vec<RunSummary>>,
}

impl SweepTable {
    /// Mean-of-last-k accuracy per seed, one vector per tau.
    pub fn accuracies(&self) -> Vec<Vec<f64>> {
        self.summaries
            .iter()
            .map(|col| col.iter().map(|s| s.mean_last_k_test_acc).collect())
            .collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.accuracies()
            .iter()
            .map(|a| a.iter().sum::<f64>() / a.len() as f64)
            .collect()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.accuracies().iter().map(|a| unbiased_std(a)).collect()
    }

    /// One column per tau in input order; one row per seed, then `mean` and
    /// `std`.
    pub fn render(&self) -> String {
        let mut out = String::from("row");
        for &t in &self.taus {
            let _ = write!(out, ",tau={}", fmt_sig(t));
        }
        out.push('\n');
        let acc = self.accuracies();
        for (s, seed) in self.seeds.iter().enumerate() {
            let _ = write!(out, "seed={seed}");
            for col in &acc {
                let _ = write!(out, ",{}", fmt_sig(col[s]));
            }
            out.push('\n');
        }
        for (name, vals) in [("mean", self.means()), ("std", self.stds())] {
            out.push_str(name);
            for v in vals {
                let _ = write!(out, ",{}", fmt_sig(v));
            }
            out.push('\n');
        }
        out
    }
}

fn run_dir(base: &Path, tau: f64, seed: u64) -> PathBuf {
    base.join(format!("tau_{}", fmt_sig(tau))).join(format!("seed_{seed}"))
}

/// One run per `(tau, seed)` under `cfg.output/tau_<tau>/seed_<seed>`, in
/// parallel; writes `sweep.csv` next to them.
pub fn sweep_tau(cfg: &ExperimentConfig, taus: &[f64], seeds: &[u64]) -> Result<SweepTable> {
    if taus.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one tau and one seed".into()));
    }
    let jobs: Vec<ExperimentConfig> = taus
        .iter()
        .flat_map(|&tau| {
            seeds.iter().map(move |&seed| {
                let mut c = cfg.clone();
                c.tau = vec![tau];
                c.seed = seed;
                c.output = run_dir(&cfg.output, tau, seed);
                c
            })
        })
        .collect();
    for j in &jobs {
        j.validate()?;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_threads()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunSummary>> =
        pool.install(|| jobs.par_iter().map(|c| run(c).map(|o| o.summary)).collect());
    let mut flat = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let summaries = taus
        .iter()
        .map(|_| flat.by_ref().take(seeds.len()).collect())
        .collect();
    let table = SweepTable {
        taus: taus.to_vec(),
        seeds: seeds.to_vec(),
        summaries,
    };
    let path = cfg.output.join("sweep.csv");
    std::fs::write(&path, table.render()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Every summary under `dir`, one line each, followed by the mean and std of
/// each `(method, tau)` group.
pub fn report(dir: &Path) -> Result<String> {
    let mut paths = Vec::new();
    find_summaries(dir, &mut paths)?;
    let mut out = String::from("run,method,tau,seed,final_test_acc,mean_last_k_test_acc,promoted_total\n");
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for p in &paths {
        let s = read_summary(p)?;
        let run = p.parent().and_then(|d| d.strip_prefix(dir).ok()).unwrap_or(Path::new(""));
        let tau = s.tau.iter().map(|&t| fmt_sig(t)).collect::<Vec<_>>().join(";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            run.display(),
            s.method,
            tau,
            s.seed,
            fmt_sig(s.final_test_acc),
            fmt_sig(s.mean_last_k_test_acc),
            s.promoted_total
        );
        groups.entry((s.method.clone(), tau)).or_default().push(s.mean_last_k_test_acc);
    }
    out.push_str("\nmethod,tau,runs,mean,std\n");
    for ((method, tau), accs) in &groups {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let _ = writeln!(
            out,
            "{method},{tau},{},{},{}",
            accs.len(),
            fmt_sig(mean),
            fmt_sig(unbiased_std(accs))
        );
    }
    Ok(out)
}
