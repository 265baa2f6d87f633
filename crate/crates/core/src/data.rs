//! Synthetic class-structured data, barely-supervised splits and the
//! weak/strong augmentation families.
//!
//! Oracle labels of unlabeled samples never leave this module except through
//! [`DataPool::oracle_labels`], which requires a [`crate::diagnostics::OracleKey`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::diagnostics::OracleKey;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Minimum pairwise distance between class centers.
    pub separation: f64,
    /// Isotropic standard deviation around each center.
    pub spread: f64,
    pub per_class_count: usize,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::Config("separation must be positive".into()));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(Error::Config("spread must be non-negative".into()));
        }
        if self.per_class_count == 0 {
            return Err(Error::Config("per_class_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Labeled set, unlabeled set and the generator that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPool {
    features: Matrix,
    oracle_labels: Vec<usize>,
    labeled_ids: Vec<usize>,
    unlabeled_ids: Vec<usize>,
    promoted: BTreeMap<usize, usize>,
    num_classes: usize,
    class_priors: Vec<f64>,
    centers: Option<Matrix>,
    spread: f64,
}

impl DataPool {
    /// Builds a pool from raw parts. Every index not in `labeled_ids` becomes
    /// unlabeled.
    pub fn from_parts(
        features: Matrix,
        labels: Vec<usize>,
        labeled_ids: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "DataPool::from_parts",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} out of range")));
        }
        let mut is_labeled = vec![false; labels.len()];
        for &id in &labeled_ids {
            if id >= labels.len() || is_labeled[id] {
                return Err(Error::Config(format!("labeled id {id} invalid or repeated")));
            }
            is_labeled[id] = true;
        }
        let mut labeled: Vec<usize> = labeled_ids;
        labeled.sort_unstable();
        let unlabeled = (0..labels.len()).filter(|&i| !is_labeled[i]).collect();
        let class_priors = priors(&labels, num_classes);
        Ok(Self {
            features,
            oracle_labels: labels,
            labeled_ids: labeled,
            unlabeled_ids: unlabeled,
            promoted: BTreeMap::new(),
            num_classes,
            class_priors,
            centers: None,
            spread: 0.0,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_priors(&self) -> &[f64] {
        &self.class_priors
    }

    pub fn labeled_ids(&self) -> &[usize] {
        &self.labeled_ids
    }

    pub fn unlabeled_ids(&self) -> &[usize] {
        &self.unlabeled_ids
    }

    pub fn promoted(&self) -> &BTreeMap<usize, usize> {
        &self.promoted
    }

    pub fn centers(&self) -> Option<&Matrix> {
        self.centers.as_ref()
    }

    pub fn is_unlabeled(&self, id: usize) -> bool {
        self.unlabeled_ids.binary_search(&id).is_ok()
    }

    /// Training-visible label: the ground truth for labeled ids, the promoted
    /// hard label for promoted ids, `None` otherwise.
    pub fn label_of(&self, id: usize) -> Option<usize> {
        if self.labeled_ids.binary_search(&id).is_ok() {
            Some(self.oracle_labels[id])
        } else {
            self.promoted.get(&id).copied()
        }
    }

    /// All oracle labels, including those of unlabeled samples.
    pub fn oracle_labels(&self, _key: &OracleKey) -> &[usize] {
        &self.oracle_labels
    }

    /// Labeled ids followed by promoted ids, the population `sample_batch`
    /// draws supervised samples from.
    pub fn supervised_ids(&self) -> Vec<usize> {
        let mut ids = self.labeled_ids.clone();
        ids.extend(self.promoted.keys().copied());
        ids
    }

    pub fn promote(&mut self, id: usize, label: usize) -> Result<()> {
        if !self.is_unlabeled(id) {
            return Err(Error::Contract(format!("promoted id {id} is not unlabeled")));
        }
        if label >= self.num_classes {
            return Err(Error::Contract(format!("promoted label {label} out of range")));
        }
        self.promoted.insert(id, label);
        Ok(())
    }

    pub fn revoke(&mut self, id: usize) -> Option<usize> {
        self.promoted.remove(&id)
    }

    /// Fresh samples from the generating distribution, `per_class` per class.
    pub fn draw_fresh(&self, per_class: usize, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
        let centers = self.centers.as_ref().ok_or_else(|| {
            Error::Contract("pool has no generator attached (loaded from CSV?)".into())
        })?;
        Ok(sample_around(centers, self.spread, per_class, rng))
    }

    /// Writes `id,label,split,f0..f{d-1}`, one row per sample in id order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,label,split");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for id in 0..self.len() {
            let split = if self.is_unlabeled(id) {
                "unlabeled"
            } else {
                "labeled"
            };
            let _ = write!(out, "{id},{},{split}", self.oracle_labels[id]);
            for v in self.features.row(id) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["id", "label", "split"] {
            return Err(parse_err(format!("bad header `{header}`")));
        }
        let dim = cols.len() - 3;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut labeled = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 3 {
                return Err(parse_err(format!("row {n}: {} fields", fields.len())));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(format!("row {n}: bad id")))?;
            if id != n {
                return Err(parse_err(format!("row {n}: ids must be dense and ordered")));
            }
            labels.push(
                fields[1]
                    .parse()
                    .map_err(|_| parse_err(format!("row {n}: bad label")))?,
            );
            match fields[2] {
                "labeled" => labeled.push(id),
                "unlabeled" => {}
                other => return Err(parse_err(format!("row {n}: bad split `{other}`"))),
            }
            for f in &fields[3..] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|_| parse_err(format!("row {n}: bad feature `{f}`")))?,
                );
            }
        }
        let features = Matrix::from_vec(labels.len(), dim, data)?;
        DataPool::from_parts(features, labels, labeled, num_classes)
    }
}

fn priors(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let m = labels.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / m).collect()
}

fn sample_around(centers: &Matrix, spread: f64, per_class: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let (k, d) = centers.shape();
    let mut data = Vec::with_capacity(k * per_class * d);
    let mut labels = Vec::with_capacity(k * per_class);
    for c in 0..k {
        for _ in 0..per_class {
            for &mu in centers.row(c) {
                data.push(mu + spread * rng.normal());
            }
            labels.push(c);
        }
    }
    (Matrix::from_vec(k * per_class, d, data).expect("consistent sizes"), labels)
}

/// Class centers with pairwise distance at least `separation`, by rejection
/// sampling from an isotropic Gaussian that widens after repeated rejections.
fn place_centers(k: usize, dim: usize, separation: f64, rng: &mut Rng) -> Matrix {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut scale = separation;
    let mut rejections = 0;
    while centers.len() < k {
        let cand: Vec<f64> = (0..dim).map(|_| scale * rng.normal()).collect();
        let ok = centers.iter().all(|c| {
            c.iter()
                .zip(&cand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= separation
        });
        if ok {
            centers.push(cand);
        } else {
            rejections += 1;
            if rejections % 100 == 0 {
                scale *= 1.25;
            }
        }
    }
    Matrix::from_rows(&centers).expect("equal widths")
}

/// Isotropic Gaussian clusters, `per_class_count` points per class, ids in
/// class-major order. Everything starts unlabeled.
pub fn generate_blobs(spec: &BlobSpec, rng: &mut Rng) -> Result<DataPool> {
    spec.validate()?;
    let centers = place_centers(spec.num_classes, spec.dim, spec.separation, rng);
    let (features, labels) = sample_around(&centers, spec.spread, spec.per_class_count, rng);
    let mut pool = DataPool::from_parts(features, labels, Vec::new(), spec.num_classes)?;
    pool.centers = Some(centers);
    pool.spread = spec.spread;
    Ok(pool)
}

/// Labels exactly `labels_per_class` samples per class, chosen uniformly
/// within each class; the rest stays unlabeled.
pub fn split_barely(pool: DataPool, labels_per_class: usize, rng: &mut Rng) -> Result<DataPool> {
    let k = pool.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (id, &l) in pool.oracle_labels.iter().enumerate() {
        by_class[l].push(id);
    }
    let mut labeled = Vec::with_capacity(k * labels_per_class);
    for (c, ids) in by_class.iter_mut().enumerate() {
        if ids.len() < labels_per_class {
            return Err(Error::Config(format!(
                "class {c} has {} samples, cannot label {labels_per_class}",
                ids.len()
            )));
        }
        rng.shuffle(ids);
        labeled.extend_from_slice(&ids[..labels_per_class]);
    }
    let DataPool {
        features,
        oracle_labels,
        centers,
        spread,
        ..
    } = pool;
    let mut out = DataPool::from_parts(features, oracle_labels, labeled, k)?;
    out.centers = centers;
    out.spread = spread;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugKind {
    Weak,
    Strong,
}

/// Parameters of a weak or strong augmentation distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationFamily {
    kind: AugKind,
    noise_sigma: f64,
    mask_prob: f64,
    scale_jitter: f64,
}

impl AugmentationFamily {
    pub fn weak(noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::Config("weak noise_sigma must be >= 0".into()));
        }
        Ok(Self {
            kind: AugKind::Weak,
            noise_sigma,
            mask_prob: 0.0,
            scale_jitter: 0.0,
        })
    }

    pub fn strong(noise_sigma: f64, mask_prob: f64, scale_jitter: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::Config("strong noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&mask_prob) {
            return Err(Error::Config("mask_prob must lie in [0, 1]".into()));
        }
        if !(scale_jitter >= 0.0) || !scale_jitter.is_finite() {
            return Err(Error::Config("scale_jitter must be >= 0".into()));
        }
        Ok(Self {
            kind: AugKind::Strong,
            noise_sigma,
            mask_prob,
            scale_jitter,
        })
    }

    /// Identity family: sampled ops leave inputs untouched.
    pub fn identity() -> Self {
        Self {
            kind: AugKind::Weak,
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn kind(&self) -> AugKind {
        self.kind
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn mask_prob(&self) -> f64 {
        self.mask_prob
    }

    pub fn scale_jitter(&self) -> f64 {
        self.scale_jitter
    }
}

/// One concrete transformation drawn from a family.
#[derive(Debug, Clone, PartialEq)]
pub struct AugOp {
    pub noise: Vec<f64>,
    pub mask: Vec<bool>,
    pub scale: f64,
}

impl AugOp {
    pub fn identity(dim: usize) -> Self {
        Self {
            noise: vec![0.0; dim],
            mask: vec![false; dim],
            scale: 1.0,
        }
    }

    /// Applies `(x + noise)`, zeroes masked coordinates, then scales.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.noise)
            .zip(&self.mask)
            .map(|((&v, &n), &m)| if m { 0.0 } else { (v + n) * self.scale })
            .collect()
    }

    /// Applies the same op to every row of `x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.noise.len() {
            return Err(Error::shape(
                "AugOp::apply",
                format!("op dim {} for input with {} columns", self.noise.len(), x.cols()),
            ));
        }
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| self.apply_row(r)).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, x.cols()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Anything that can hand out augmentation ops.
pub trait Augment {
    fn sample_op(&self, dim: usize, rng: &mut Rng) -> AugOp;

    /// Augments each row of `x` with its own independently drawn op.
    fn augment_rows(&self, x: &Matrix, rng: &mut Rng) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let op = self.sample_op(x.cols(), rng);
            out.row_mut(r).copy_from_slice(&op.apply_row(x.row(r)));
        }
        out
    }
}

impl Augment for AugmentationFamily {
    fn sample_op(&self, dim: usize, rng: &mut Rng) -> AugOp {
        let noise = if self.noise_sigma > 0.0 {
            (0..dim).map(|_| self.noise_sigma * rng.normal()).collect()
        } else {
            vec![0.0; dim]
        };
        let mask = if self.mask_prob > 0.0 {
            (0..dim).map(|_| rng.bernoulli(self.mask_prob)).collect()
        } else {
            vec![false; dim]
        };
        let scale = if self.scale_jitter > 0.0 {
            1.0 + rng.uniform_range(-self.scale_jitter, self.scale_jitter)
        } else {
            1.0
        };
        AugOp { noise, mask, scale }
    }
}

/// A finite set of ops, drawn uniformly. Handy for exhaustive checks.
#[derive(Debug, Clone)]
pub struct DiscreteFamily {
    pub ops: Vec<AugOp>,
}

impl Augment for DiscreteFamily {
    fn sample_op(&self, _dim: usize, rng: &mut Rng) -> AugOp {
        self.ops[rng.below(self.ops.len())].clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub ids: Vec<usize>,
    pub x: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub ids: Vec<usize>,
    pub weak: Matrix,
    pub strong: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labeled: LabeledBatch,
    pub unlabeled: UnlabeledBatch,
}

/// Draws `b_s` supervised samples (labeled or promoted, with replacement,
/// weak-augmented) and `mu_ratio * b_s` unlabeled samples, each with one weak
/// and one strong view.
pub fn sample_batch(
    pool: &DataPool,
    b_s: usize,
    mu_ratio: usize,
    weak: &impl Augment,
    strong: &impl Augment,
    rng: &mut Rng,
) -> Result<Batch> {
    if b_s == 0 {
        return Err(Error::Config("labeled batch size must be at least 1".into()));
    }
    let supervised = pool.supervised_ids();
    if supervised.is_empty() {
        return Err(Error::Config("labeled set is empty".into()));
    }
    let d = pool.dim();
    let feats = pool.features();

    let ids: Vec<usize> = (0..b_s).map(|_| supervised[rng.below(supervised.len())]).collect();
    let labels = ids
        .iter()
        .map(|&i| pool.label_of(i).expect("supervised id has a label"))
        .collect();
    let x = weak.augment_rows(&feats.select_rows(&ids), rng);

    let n_u = if pool.unlabeled_ids().is_empty() {
        0
    } else {
        mu_ratio * b_s
    };
    let u_ids: Vec<usize> = (0..n_u)
        .map(|_| pool.unlabeled_ids()[rng.below(pool.unlabeled_ids().len())])
        .collect();
    let mut xw = Matrix::zeros(n_u, d);
    let mut xs = Matrix::zeros(n_u, d);
    for (r, &id) in u_ids.iter().enumerate() {
        let src = feats.row(id);
        let w = weak.sample_op(d, rng);
        let s = strong.sample_op(d, rng);
        xw.row_mut(r).copy_from_slice(&w.apply_row(src));
        xs.row_mut(r).copy_from_slice(&s.apply_row(src));
    }
    Ok(Batch {
        labeled: LabeledBatch { ids, x, labels },
        unlabeled: UnlabeledBatch {
            ids: u_ids,
            weak: xw,
            strong: xs,
        },
    })
}
