//! Balanced soft cluster assignment by Sinkhorn-Knopp scaling.
//!
//! The result is a stop-gradient target: nothing here is differentiated.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularisation; smaller is sharper.
    pub eps: f64,
    /// Full row-then-column sweeps.
    pub iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            iters: 3,
        }
    }
}

/// Row-stochastic `B x k` assignment whose columns each carry about `B / k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub q: Matrix,
    /// The transport plan before the final row renormalization; its column
    /// sums are `B / k` up to rounding whenever `iters >= 1`.
    pub balanced: Matrix,
}

impl SoftAssignment {
    pub fn rows(&self) -> usize {
        self.q.rows()
    }
}

/// Starts from `exp((scores - max) / eps)` and alternately scales rows to
/// sum 1 and columns to sum `B / k`, `iters` times; a final pass scales rows
/// to sum 1.
pub fn sinkhorn_knopp(scores: &Matrix, eps: f64, iters: usize) -> Result<SoftAssignment> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("sinkhorn eps must be positive, got {eps}")));
    }
    if !scores.is_finite() {
        return Err(Error::Numeric("non-finite sinkhorn scores".into()));
    }
    let (b, k) = scores.shape();
    if b == 0 || k == 0 {
        return Ok(SoftAssignment {
            q: scores.clone(),
            balanced: scores.clone(),
        });
    }
    let max = scores.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q = scores.map(|s| ((s - max) / eps).exp());
    let col_target = b as f64 / k as f64;

    for _ in 0..iters {
        normalize_rows(&mut q);
        let sums = q.column_sums();
        for r in 0..b {
            for (v, &s) in q.row_mut(r).iter_mut().zip(sums.as_slice()) {
                *v *= col_target / s;
            }
        }
    }
    let balanced = q.clone();
    normalize_rows(&mut q);

    if !q.is_finite() || !balanced.is_finite() {
        return Err(Error::Numeric(format!(
            "sinkhorn produced non-finite values (eps={eps}, score range exceeds exp range)"
        )));
    }
    Ok(SoftAssignment { q, balanced })
}

fn normalize_rows(q: &mut Matrix) {
    for r in 0..q.rows() {
        let row = q.row_mut(r);
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// `max_j |colsum_j - B/k| / (B/k)` of the final assignment.
pub fn balance_deficit(q: &SoftAssignment) -> f64 {
    column_deficit(&q.q)
}

/// [`balance_deficit`] of an arbitrary `B x k` matrix.
pub fn column_deficit(m: &Matrix) -> f64 {
    let (b, k) = m.shape();
    if b == 0 || k == 0 {
        return 0.0;
    }
    let target = b as f64 / k as f64;
    m.column_sums()
        .as_slice()
        .iter()
        .fold(0.0, |m, &s| m.max((s - target).abs() / target))
}

/// Largest share of total mass carried by any single column.
pub fn max_column_share(q: &SoftAssignment) -> f64 {
    let total = q.q.sum();
    if total == 0.0 {
        return 0.0;
    }
    q.q.column_sums()
        .as_slice()
        .iter()
        .fold(0.0, |m, &s| m.max(s / total))
}
