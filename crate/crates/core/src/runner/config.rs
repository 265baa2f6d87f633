//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::assign::SinkhornConfig;
use crate::data::BlobSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Objective, UnlabeledMode};
use crate::model::{ModelSpec, SgdConfig};
use crate::refine::RefinerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FixMatch,
    Composite,
    CompositeAdaptive,
    Less,
    SslThenFixMatch,
    SslOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FixMatch,
        Method::Composite,
        Method::CompositeAdaptive,
        Method::Less,
        Method::SslThenFixMatch,
        Method::SslOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FixMatch => "fixmatch",
            Method::Composite => "composite",
            Method::CompositeAdaptive => "composite_adaptive",
            Method::Less => "less",
            Method::SslThenFixMatch => "ssl_then_fixmatch",
            Method::SslOnly => "ssl_only",
        }
    }

    pub fn default_adaptive(self) -> bool {
        matches!(self, Method::CompositeAdaptive | Method::Less)
    }

    pub fn default_refine(self) -> bool {
        self == Method::Less
    }

    /// Loss terms used during `epoch` (0-based).
    pub fn objective(self, epoch: usize, pretrain_epochs: usize) -> Objective {
        let ssl = Objective {
            supervised: false,
            unlabeled: Some(UnlabeledMode::Coreg),
        };
        let with = |mode| Objective {
            supervised: true,
            unlabeled: Some(mode),
        };
        match self {
            Method::FixMatch => with(UnlabeledMode::Distill),
            Method::Composite | Method::CompositeAdaptive | Method::Less => with(UnlabeledMode::Composite),
            Method::SslOnly => ssl,
            Method::SslThenFixMatch if epoch < pretrain_epochs => ssl,
            Method::SslThenFixMatch => with(UnlabeledMode::Distill),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// `auto` defers to the method's default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Auto,
    On,
    Off,
}

impl Toggle {
    pub fn resolve(self, default: bool) -> bool {
        match self {
            Toggle::Auto => default,
            Toggle::On => true,
            Toggle::Off => false,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Toggle::Auto => "auto",
            Toggle::On => "true",
            Toggle::Off => "false",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr * cos(7 pi t / (16 T))` over the whole run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub data: BlobSpec,
    pub labels_per_class: usize,
    pub model: ModelSpec,
    /// One value for every class or one per class.
    pub tau: Vec<f64>,
    pub mu_ratio: usize,
    pub b_s: usize,
    pub epochs: usize,
    /// `None` means `ceil(|U| / (mu_ratio * b_s))`.
    pub steps_per_epoch: Option<usize>,
    pub pretrain_epochs: usize,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub lr_schedule: LrSchedule,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_mask: f64,
    pub strong_jitter: f64,
    pub adaptive: Toggle,
    pub refine: Toggle,
    pub alpha: f64,
    pub epsilon: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub refiner: RefinerConfig,
    pub ledger_draws: usize,
    pub test_per_class: usize,
    /// Number of trailing checkpoints averaged in the summary.
    pub last_k: usize,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = BlobSpec {
            num_classes: 5,
            dim: 8,
            separation: 3.0,
            spread: 2.0,
            per_class_count: 101,
        };
        Self {
            method: Method::Less,
            seed: 0,
            model: ModelSpec::new(data.dim, data.num_classes),
            data,
            labels_per_class: 1,
            tau: vec![0.98],
            mu_ratio: 7,
            b_s: 8,
            epochs: 60,
            steps_per_epoch: None,
            pretrain_epochs: 0,
            loss: LossConfig::default(),
            sgd: SgdConfig::default(),
            lr_schedule: LrSchedule::Cosine,
            weak_sigma: 0.1,
            strong_sigma: 0.5,
            strong_mask: 0.2,
            strong_jitter: 0.2,
            adaptive: Toggle::Auto,
            refine: Toggle::Auto,
            alpha: 0.9,
            epsilon: 0.001,
            tau_min: 0.6,
            tau_max: 0.9999,
            refiner: RefinerConfig::default(),
            ledger_draws: 1,
            test_per_class: 200,
            last_k: 10,
            output: PathBuf::from("runs/default"),
        }
    }
}

/// Every accepted key with a one-line description. Defaults are those of
/// [`ExperimentConfig::default`].
pub const KEYS: &[(&str, &str)] = &[
    ("method", "fixmatch | composite | composite_adaptive | less | ssl_then_fixmatch | ssl_only"),
    ("seed", "root seed; every random stream derives from it"),
    ("num_classes", "number of classes k"),
    ("dim", "feature dimension"),
    ("separation", "minimum distance between blob centers"),
    ("spread", "isotropic standard deviation of each blob"),
    ("per_class_count", "samples generated per class"),
    ("labels_per_class", "labeled samples kept per class"),
    ("hidden", "comma-separated hidden layer widths"),
    ("proj_dim", "projection head width"),
    ("num_prototypes", "number of prototypes (default 2k)"),
    ("temp_proto", "prototype softmax temperature"),
    ("tau", "confidence threshold: one value or one per class"),
    ("mu_ratio", "unlabeled rows per labeled row"),
    ("b_s", "labeled rows per batch"),
    ("epochs", "training epochs"),
    ("steps_per_epoch", "integer, or auto for ceil(|U| / (mu_ratio * b_s))"),
    ("pretrain_epochs", "leading epochs of pure consistency training in ssl_then_fixmatch"),
    ("lambda_u", "unlabeled loss weight"),
    ("halve_coreg", "halve the symmetric consistency loss"),
    ("sinkhorn_eps", "Sinkhorn entropic regularisation"),
    ("sinkhorn_iters", "Sinkhorn sweeps"),
    ("lr", "base learning rate"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    ("lr_schedule", "constant | cosine"),
    ("weak_sigma", "weak augmentation noise"),
    ("strong_sigma", "strong augmentation noise"),
    ("strong_mask", "strong augmentation feature drop probability"),
    ("strong_jitter", "strong augmentation scale jitter"),
    ("adaptive", "auto | true | false: adaptive per-class thresholds"),
    ("refine", "auto | true | false: history-based promotion"),
    ("alpha", "threshold controller EMA coefficient"),
    ("epsilon", "threshold controller step"),
    ("tau_min", "lower clamp for adaptive thresholds"),
    ("tau_max", "upper clamp for adaptive thresholds"),
    ("n_min", "minimum history length before promotion"),
    ("refine_lambda", "required lower bound for promotion"),
    ("n_cap", "prediction history capacity"),
    ("revoke", "re-test promoted samples every epoch"),
    ("ledger_draws", "weak draws per unlabeled sample in the ledger"),
    ("test_per_class", "held-out test samples per class"),
    ("last_k", "trailing checkpoints averaged in the summary"),
    ("output", "run directory"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "num_classes" => {
                self.data.num_classes = parse(key, v)?;
                self.model.num_classes = self.data.num_classes;
            }
            "dim" => {
                self.data.dim = parse(key, v)?;
                self.model.input_dim = self.data.dim;
            }
            "separation" => self.data.separation = parse(key, v)?,
            "spread" => self.data.spread = parse(key, v)?,
            "per_class_count" => self.data.per_class_count = parse(key, v)?,
            "labels_per_class" => self.labels_per_class = parse(key, v)?,
            "hidden" => {
                self.model.hidden = if v.is_empty() { Vec::new() } else { parse_list(key, v)? }
            }
            "proj_dim" => self.model.proj_dim = parse(key, v)?,
            "num_prototypes" => self.model.num_prototypes = parse(key, v)?,
            "temp_proto" => self.model.temp_proto = parse(key, v)?,
            "tau" => self.tau = parse_list(key, v)?,
            "mu_ratio" => self.mu_ratio = parse(key, v)?,
            "b_s" => self.b_s = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => {
                self.steps_per_epoch = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "lambda_u" => self.loss.lambda_u = parse(key, v)?,
            "halve_coreg" => self.loss.halve_coreg = parse_bool(key, v)?,
            "sinkhorn_eps" => self.loss.sinkhorn.eps = parse(key, v)?,
            "sinkhorn_iters" => self.loss.sinkhorn.iters = parse(key, v)?,
            "lr" => self.sgd.lr = parse(key, v)?,
            "momentum" => self.sgd.momentum = parse(key, v)?,
            "weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(Error::Config(format!("`{key}`: unknown schedule `{v}`"))),
                }
            }
            "weak_sigma" => self.weak_sigma = parse(key, v)?,
            "strong_sigma" => self.strong_sigma = parse(key, v)?,
            "strong_mask" => self.strong_mask = parse(key, v)?,
            "strong_jitter" => self.strong_jitter = parse(key, v)?,
            "adaptive" | "refine" => {
                let t = match v {
                    "auto" => Toggle::Auto,
                    "true" => Toggle::On,
                    "false" => Toggle::Off,
                    _ => return Err(Error::Config(format!("`{key}`: expected auto, true or false"))),
                };
                if key == "adaptive" {
                    self.adaptive = t;
                } else {
                    self.refine = t;
                }
            }
            "alpha" => self.alpha = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "tau_min" => self.tau_min = parse(key, v)?,
            "tau_max" => self.tau_max = parse(key, v)?,
            "n_min" => self.refiner.n_min = parse(key, v)?,
            "refine_lambda" => self.refiner.lambda = parse(key, v)?,
            "n_cap" => self.refiner.n_cap = parse(key, v)?,
            "revoke" => self.refiner.revoke = parse_bool(key, v)?,
            "ledger_draws" => self.ledger_draws = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "last_k" => self.last_k = parse(key, v)?,
            "output" => self.output = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a
    /// comment; blank lines are ignored; a key may appear once.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Every key with its current value, in [`KEYS`] order; feeding the
    /// output back to [`ExperimentConfig::parse_str`] reproduces `self`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let v = match *key {
                "method" => self.method.to_string(),
                "seed" => self.seed.to_string(),
                "num_classes" => self.data.num_classes.to_string(),
                "dim" => self.data.dim.to_string(),
                "separation" => self.data.separation.to_string(),
                "spread" => self.data.spread.to_string(),
                "per_class_count" => self.data.per_class_count.to_string(),
                "labels_per_class" => self.labels_per_class.to_string(),
                "hidden" => join(&self.model.hidden),
                "proj_dim" => self.model.proj_dim.to_string(),
                "num_prototypes" => self.model.num_prototypes.to_string(),
                "temp_proto" => self.model.temp_proto.to_string(),
                "tau" => join(&self.tau),
                "mu_ratio" => self.mu_ratio.to_string(),
                "b_s" => self.b_s.to_string(),
                "epochs" => self.epochs.to_string(),
                "steps_per_epoch" => self
                    .steps_per_epoch
                    .map_or_else(|| "auto".to_string(), |s| s.to_string()),
                "pretrain_epochs" => self.pretrain_epochs.to_string(),
                "lambda_u" => self.loss.lambda_u.to_string(),
                "halve_coreg" => self.loss.halve_coreg.to_string(),
                "sinkhorn_eps" => self.loss.sinkhorn.eps.to_string(),
                "sinkhorn_iters" => self.loss.sinkhorn.iters.to_string(),
                "lr" => self.sgd.lr.to_string(),
                "momentum" => self.sgd.momentum.to_string(),
                "weight_decay" => self.sgd.weight_decay.to_string(),
                "lr_schedule" => match self.lr_schedule {
                    LrSchedule::Constant => "constant".into(),
                    LrSchedule::Cosine => "cosine".into(),
                },
                "weak_sigma" => self.weak_sigma.to_string(),
                "strong_sigma" => self.strong_sigma.to_string(),
                "strong_mask" => self.strong_mask.to_string(),
                "strong_jitter" => self.strong_jitter.to_string(),
                "adaptive" => self.adaptive.name().into(),
                "refine" => self.refine.name().into(),
                "alpha" => self.alpha.to_string(),
                "epsilon" => self.epsilon.to_string(),
                "tau_min" => self.tau_min.to_string(),
                "tau_max" => self.tau_max.to_string(),
                "n_min" => self.refiner.n_min.to_string(),
                "refine_lambda" => self.refiner.lambda.to_string(),
                "n_cap" => self.refiner.n_cap.to_string(),
                "revoke" => self.refiner.revoke.to_string(),
                "ledger_draws" => self.ledger_draws.to_string(),
                "test_per_class" => self.test_per_class.to_string(),
                "last_k" => self.last_k.to_string(),
                "output" => self.output.display().to_string(),
                other => unreachable!("key {other} not rendered"),
            };
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn adaptive_enabled(&self) -> bool {
        self.adaptive.resolve(self.method.default_adaptive())
    }

    pub fn refine_enabled(&self) -> bool {
        self.refine.resolve(self.method.default_refine())
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    /// Per-class initial thresholds.
    pub fn tau_init(&self) -> Vec<f64> {
        if self.tau.len() == 1 {
            vec![self.tau[0]; self.num_classes()]
        } else {
            self.tau.clone()
        }
    }

    pub fn sinkhorn(&self) -> &SinkhornConfig {
        &self.loss.sinkhorn
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.validate()?;
        self.model.validate()?;
        let k = self.num_classes();
        if self.model.num_classes != k || self.model.input_dim != self.data.dim {
            return bad("model and data disagree on classes or dimension".into());
        }
        if self.labels_per_class == 0 || self.labels_per_class >= self.data.per_class_count {
            return bad(format!(
                "labels_per_class must lie in [1, per_class_count), got {}",
                self.labels_per_class
            ));
        }
        if self.tau.len() != 1 && self.tau.len() != k {
            return bad(format!("tau needs 1 or {k} values, got {}", self.tau.len()));
        }
        let chance = 1.0 / k as f64;
        if let Some(t) = self.tau.iter().find(|&&t| !(t > chance && t <= 1.0)) {
            return bad(format!("tau must lie in (1/k, 1], got {t}"));
        }
        if self.b_s == 0 || self.mu_ratio == 0 {
            return bad("b_s and mu_ratio must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        if self.method == Method::SslThenFixMatch && self.pretrain_epochs > self.epochs {
            return bad("pretrain_epochs exceeds epochs".into());
        }
        if !(self.loss.lambda_u >= 0.0 && self.loss.lambda_u.is_finite()) {
            return bad("lambda_u must be finite and non-negative".into());
        }
        if !(self.loss.sinkhorn.eps > 0.0) || self.loss.sinkhorn.iters == 0 {
            return bad("sinkhorn_eps must be positive and sinkhorn_iters at least 1".into());
        }
        if !(self.sgd.lr >= 0.0) || !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0)
        {
            return bad("lr >= 0, momentum in [0, 1) and weight_decay >= 0 required".into());
        }
        for (name, v) in [
            ("weak_sigma", self.weak_sigma),
            ("strong_sigma", self.strong_sigma),
            ("strong_jitter", self.strong_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.strong_mask) {
            return bad("strong_mask must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.alpha) || !(self.epsilon > 0.0) {
            return bad("alpha in [0, 1) and epsilon > 0 required".into());
        }
        if !(self.tau_min > chance && self.tau_min <= self.tau_max && self.tau_max <= 1.0) {
            return bad("need 1/k < tau_min <= tau_max <= 1".into());
        }
        self.refiner.validate()?;
        if self.ledger_draws == 0 || self.test_per_class == 0 || self.last_k == 0 {
            return bad("ledger_draws, test_per_class and last_k must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("method", "ssl_then_fixmatch").unwrap();
        cfg.set("tau", "0.9,0.95,0.98,0.99,0.995").unwrap();
        cfg.set("hidden", "32").unwrap();
        cfg.set("steps_per_epoch", "7").unwrap();
        cfg.set("refine", "false").unwrap();
        let back = ExperimentConfig::parse_str(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_kv().lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_errors() {
        let cfg = ExperimentConfig::parse_str("# a run\nmethod = fixmatch # baseline\n\nseed=3\n").unwrap();
        assert_eq!(cfg.method, Method::FixMatch);
        assert_eq!(cfg.seed, 3);
        for bad in ["method = mixmatch", "seed = x", "nope = 1", "seed", "seed = 1\nseed = 2"] {
            assert!(matches!(ExperimentConfig::parse_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn method_toggles() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.adaptive_enabled() && cfg.refine_enabled());
        cfg.set("adaptive", "false").unwrap();
        cfg.set("refine", "false").unwrap();
        assert!(!cfg.adaptive_enabled() && !cfg.refine_enabled());
        cfg.set("method", "fixmatch").unwrap();
        cfg.set("adaptive", "auto").unwrap();
        assert!(!cfg.adaptive_enabled());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        for (k, v) in [
            ("tau", "0.2"),
            ("tau", "1.01"),
            ("tau", "0.9,0.9"),
            ("b_s", "0"),
            ("labels_per_class", "0"),
            ("n_min", "10"),
            ("sinkhorn_eps", "0"),
            ("strong_mask", "1.5"),
            ("tau_min", "0.1"),
        ] {
            let mut cfg = ExperimentConfig::default();
            cfg.set(k, v).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{k}={v}");
        }
    }
}
