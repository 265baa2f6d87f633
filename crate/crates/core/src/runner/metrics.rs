//! Per-epoch metrics CSV and the run summary file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Fixed columns before the per-class threshold and EMA columns.
pub const FIXED_COLUMNS: [&str; 14] = [
    "epoch",
    "step",
    "method",
    "seed",
    "loss_sup",
    "loss_distill",
    "loss_coreg",
    "loss_total",
    "gated_frac",
    "conf_correct",
    "conf_incorrect",
    "unconf",
    "test_acc",
    "promoted_total",
];

pub fn header(num_classes: usize) -> Vec<String> {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend((0..num_classes).map(|c| format!("tau_c{c}")));
    cols.extend((0..num_classes).map(|c| format!("p_c{c}")));
    cols
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub method: String,
    pub seed: u64,
    pub loss_sup: f64,
    pub loss_distill: f64,
    pub loss_coreg: f64,
    pub loss_total: f64,
    pub gated_frac: f64,
    pub conf_correct: f64,
    pub conf_incorrect: f64,
    pub unconf: f64,
    pub test_acc: f64,
    pub promoted_total: usize,
    pub tau_c: Vec<f64>,
    pub p_c: Vec<f64>,
}

/// `%.9g`: nine significant digits, trailing zeros dropped, exponent form
/// outside `[1e-4, 1e9)`.
pub fn fmt_sig(v: f64) -> String {
    const DIGITS: i32 = 9;
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // the exponent after rounding to DIGITS digits
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= DIGITS {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (DIGITS - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl MetricsRow {
    pub fn to_fields(&self) -> Vec<String> {
        let mut f = vec![
            self.epoch.to_string(),
            self.step.to_string(),
            self.method.clone(),
            self.seed.to_string(),
        ];
        f.extend(
            [
                self.loss_sup,
                self.loss_distill,
                self.loss_coreg,
                self.loss_total,
                self.gated_frac,
                self.conf_correct,
                self.conf_incorrect,
                self.unconf,
                self.test_acc,
            ]
            .iter()
            .map(|&v| fmt_sig(v)),
        );
        f.push(self.promoted_total.to_string());
        f.extend(self.tau_c.iter().chain(&self.p_c).map(|&v| fmt_sig(v)));
        f
    }

    pub fn from_fields(fields: &[&str], num_classes: usize) -> std::result::Result<Self, String> {
        let expected = FIXED_COLUMNS.len() + 2 * num_classes;
        if fields.len() != expected {
            return Err(format!("{} fields, expected {expected}", fields.len()));
        }
        let num = |i: usize| -> std::result::Result<f64, String> {
            fields[i].parse().map_err(|_| format!("bad number `{}`", fields[i]))
        };
        let int = |i: usize| -> std::result::Result<u64, String> {
            fields[i].parse().map_err(|_| format!("bad integer `{}`", fields[i]))
        };
        let tail = |start: usize| (start..start + num_classes).map(num).collect::<std::result::Result<Vec<_>, _>>();
        Ok(Self {
            epoch: int(0)? as usize,
            step: int(1)? as usize,
            method: fields[2].to_string(),
            seed: int(3)?,
            loss_sup: num(4)?,
            loss_distill: num(5)?,
            loss_coreg: num(6)?,
            loss_total: num(7)?,
            gated_frac: num(8)?,
            conf_correct: num(9)?,
            conf_incorrect: num(10)?,
            unconf: num(11)?,
            test_acc: num(12)?,
            promoted_total: int(13)? as usize,
            tau_c: tail(14)?,
            p_c: tail(14 + num_classes)?,
        })
    }
}

/// Header line plus one line per row.
pub fn render_csv(rows: &[MetricsRow], num_classes: usize) -> Result<String> {
    let mut out = header(num_classes).join(",");
    out.push('\n');
    for r in rows {
        if r.tau_c.len() != num_classes || r.p_c.len() != num_classes {
            return Err(Error::shape(
                "emit_csv",
                format!("row has {} thresholds for {num_classes} classes", r.tau_c.len()),
            ));
        }
        out.push_str(&r.to_fields().join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(rows: &[MetricsRow], num_classes: usize, path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(rows, num_classes)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path, num_classes: usize) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    if head != header(num_classes).join(",") {
        return Err(parse_err(format!("unexpected header `{head}`")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            MetricsRow::from_fields(&fields, num_classes).map_err(|d| parse_err(format!("line {}: {d}", i + 2)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub tau: Vec<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub final_test_acc: f64,
    /// Mean test accuracy over the last `last_k` epoch checkpoints.
    pub mean_last_k_test_acc: f64,
    pub last_k: usize,
    pub promoted_total: usize,
    pub metrics_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunSummary {
    pub fn to_kv(&self) -> String {
        let tau = self.tau.iter().map(|&t| fmt_sig(t)).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "method={}", self.method);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "tau={tau}");
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "steps={}", self.steps);
        let _ = writeln!(out, "final_test_acc={}", fmt_sig(self.final_test_acc));
        let _ = writeln!(out, "mean_last_k_test_acc={}", fmt_sig(self.mean_last_k_test_acc));
        let _ = writeln!(out, "last_k={}", self.last_k);
        let _ = writeln!(out, "promoted_total={}", self.promoted_total);
        let _ = writeln!(out, "metrics={}", self.metrics_path.display());
        let ckpt = self.checkpoint_path.as_ref().map(|p| p.display().to_string());
        let _ = writeln!(out, "checkpoint={}", ckpt.unwrap_or_default());
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_once('=').ok_or_else(|| format!("bad line `{l}`")))
            .collect::<std::result::Result<_, _>>()?;
        let get = |k: &str| map.get(k).copied().ok_or_else(|| format!("missing `{k}`"));
        let num = |k: &str| -> std::result::Result<f64, String> {
            get(k)?.parse().map_err(|_| format!("bad `{k}`"))
        };
        let int = |k: &str| -> std::result::Result<u64, String> {
            get(k)?.parse().map_err(|_| format!("bad `{k}`"))
        };
        let tau = get("tau")?
            .split(',')
            .map(|s| s.parse().map_err(|_| format!("bad tau `{s}`")))
            .collect::<std::result::Result<_, _>>()?;
        let ckpt = get("checkpoint")?;
        Ok(Self {
            method: get("method")?.to_string(),
            seed: int("seed")?,
            tau,
            epochs: int("epochs")? as usize,
            steps: int("steps")? as usize,
            final_test_acc: num("final_test_acc")?,
            mean_last_k_test_acc: num("mean_last_k_test_acc")?,
            last_k: int("last_k")? as usize,
            promoted_total: int("promoted_total")? as usize,
            metrics_path: PathBuf::from(get("metrics")?),
            checkpoint_path: (!ckpt.is_empty()).then(|| PathBuf::from(ckpt)),
        })
    }
}

pub fn emit_summary(summary: &RunSummary, path: &Path) -> Result<()> {
    std::fs::write(path, summary.to_kv()).map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunSummary::parse(&text).map_err(|detail| Error::Parse {
        path: path.to_path_buf(),
        detail,
    })
}
