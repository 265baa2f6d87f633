//! The trainable classifier: a tanh MLP trunk shared by a class head and a
//! projection head whose normalized embedding is scored against unit-norm
//! prototypes.

mod checkpoint;

use crate::error::{Error, Result};
use crate::numerics::{
    l2_normalize_rows, l2_normalize_rows_backward, matmul, matmul_backward, softmax_rows, Matrix,
    Rng,
};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Norm floor used when normalizing embeddings and prototypes.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub proj_dim: usize,
    pub num_prototypes: usize,
    pub temp_proto: f64,
}

impl ModelSpec {
    /// Two hidden layers of width 64, a 16-d projection and `2 * num_classes`
    /// prototypes at temperature 0.1.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            num_classes,
            proj_dim: 16,
            num_prototypes: 2 * num_classes,
            temp_proto: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.proj_dim == 0 || self.num_prototypes == 0 {
            return Err(Error::Config(
                "input_dim, proj_dim and num_prototypes must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.temp_proto > 0.0) || !self.temp_proto.is_finite() {
            return Err(Error::Config("temp_proto must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Affine layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Matrix::zeros(inp, out),
            bias: Matrix::zeros(1, out),
        }
    }

    fn random(inp: usize, out: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        let w = (0..inp * out).map(|_| std * rng.normal()).collect();
        Self {
            weight: Matrix::from_vec(inp, out, w).expect("sized"),
            bias: Matrix::zeros(1, out),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.weight)?.add_row_broadcast(&self.bias)
    }

    /// Returns (layer grads, gradient on the input).
    fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<(Dense, Matrix)> {
        let (gx, gw) = matmul_backward(x, &self.weight, grad_out)?;
        Ok((
            Dense {
                weight: gw,
                bias: grad_out.column_sums(),
            },
            gx,
        ))
    }
}

/// Every trainable tensor. Also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub hidden: Vec<Dense>,
    pub class_head: Dense,
    pub proj_head: Dense,
    /// `num_prototypes x proj_dim`, unit-norm rows.
    pub prototypes: Matrix,
}

impl Params {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut inp = spec.input_dim;
        for &w in &spec.hidden {
            hidden.push(Dense::zeros(inp, w));
            inp = w;
        }
        Self {
            hidden,
            class_head: Dense::zeros(inp, spec.num_classes),
            proj_head: Dense::zeros(inp, spec.proj_dim),
            prototypes: Matrix::zeros(spec.num_prototypes, spec.proj_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let zd = |d: &Dense| Dense {
            weight: z(&d.weight),
            bias: z(&d.bias),
        };
        Self {
            hidden: self.hidden.iter().map(zd).collect(),
            class_head: zd(&self.class_head),
            proj_head: zd(&self.proj_head),
            prototypes: z(&self.prototypes),
        }
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, d) in self.hidden.iter().enumerate() {
            out.push((format!("hidden[{i}].weight"), &d.weight));
            out.push((format!("hidden[{i}].bias"), &d.bias));
        }
        out.push(("class_head.weight".into(), &self.class_head.weight));
        out.push(("class_head.bias".into(), &self.class_head.bias));
        out.push(("proj_head.weight".into(), &self.proj_head.weight));
        out.push(("proj_head.bias".into(), &self.proj_head.bias));
        out.push(("prototypes".into(), &self.prototypes));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, d) in self.hidden.iter_mut().enumerate() {
            out.push((format!("hidden[{i}].weight"), &mut d.weight));
            out.push((format!("hidden[{i}].bias"), &mut d.bias));
        }
        out.push(("class_head.weight".into(), &mut self.class_head.weight));
        out.push(("class_head.bias".into(), &mut self.class_head.bias));
        out.push(("proj_head.weight".into(), &mut self.proj_head.weight));
        out.push(("proj_head.bias".into(), &mut self.proj_head.bias));
        out.push(("prototypes".into(), &mut self.prototypes));
        out
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Params, s: f64) -> Result<()> {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_scaled_in_place(b, s)?;
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Params {
        let mut out = self.clone();
        for (_, m) in out.named_mut() {
            *m = m.scale(s);
        }
        out
    }

    /// Concatenation of all entries in [`Params::named`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().to_vec())
            .collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.named()
            .into_iter()
            .map(|(_, m)| m.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.named()
            .into_iter()
            .fold(0.0, |acc, (_, m)| acc.max(m.max_abs()))
    }

    fn same_layout(&self, other: &Params) -> bool {
        let a = self.named();
        let b = other.named();
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.shape() == y.shape())
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut {
    pub class_logits: Matrix,
    pub class_probs: Matrix,
    /// L2-normalized projection, `B x proj_dim`.
    pub embedding: Matrix,
    /// Cosine similarity of each embedding with each prototype, `B x k`.
    pub proto_similarity: Matrix,
    /// `proto_similarity / temp_proto`.
    pub proto_scores: Matrix,
    pub proto_probs: Matrix,
}

/// Intermediates kept for [`ModelState::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each hidden layer, then the trunk output last.
    activations: Vec<Matrix>,
    proj_norms: Vec<f64>,
    pub out: ForwardOut,
}

/// Stop-gradient confidence decision for one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub gate: bool,
    pub label: usize,
    pub max_prob: f64,
}

/// Gate each row of `probs`: label is the argmax, gate is
/// `max_prob >= thresholds[label]`.
pub fn confidence_from_probs(probs: &Matrix, thresholds: &[f64]) -> Result<Vec<Confidence>> {
    if thresholds.len() != probs.cols() {
        return Err(Error::shape(
            "confidence_from_probs",
            format!("{} thresholds for {} classes", thresholds.len(), probs.cols()),
        ));
    }
    Ok(probs
        .row_iter()
        .zip(probs.argmax_rows())
        .map(|(row, label)| {
            let max_prob = row[label];
            Confidence {
                gate: max_prob >= thresholds[label],
                label,
                max_prob,
            }
        })
        .collect())
}

/// Momentum SGD with L2 weight decay on one tensor:
/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub fn sgd_update(param: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, cfg: &SgdConfig) {
    let p = param.as_mut_slice();
    let v = velocity.as_mut_slice();
    for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(grad.as_slice()) {
        let g = if cfg.weight_decay != 0.0 {
            gi + cfg.weight_decay * *pi
        } else {
            gi
        };
        *vi = cfg.momentum * *vi + g;
        *pi -= cfg.lr * *vi;
    }
}

fn normalize_rows_in_place(m: &mut Matrix) {
    let (normed, _) = l2_normalize_rows(m, NORM_FLOOR);
    *m = normed;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    spec: ModelSpec,
    pub params: Params,
    velocity: Params,
    pub sgd: SgdConfig,
}

impl ModelState {
    /// Gaussian fan-in initialisation, zero biases, random unit prototypes.
    pub fn init(spec: ModelSpec, sgd: SgdConfig, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut inp = spec.input_dim;
        for &w in &spec.hidden {
            hidden.push(Dense::random(inp, w, rng));
            inp = w;
        }
        let class_head = Dense::random(inp, spec.num_classes, rng);
        let proj_head = Dense::random(inp, spec.proj_dim, rng);
        let protos = (0..spec.num_prototypes * spec.proj_dim)
            .map(|_| rng.normal())
            .collect();
        let mut prototypes = Matrix::from_vec(spec.num_prototypes, spec.proj_dim, protos)?;
        normalize_rows_in_place(&mut prototypes);
        let params = Params {
            hidden,
            class_head,
            proj_head,
            prototypes,
        };
        let velocity = params.zeros_like();
        Ok(Self {
            spec,
            params,
            velocity,
            sgd,
        })
    }

    /// All-zero weights with unit prototypes along the first axis.
    pub fn zeros(spec: ModelSpec, sgd: SgdConfig) -> Result<Self> {
        spec.validate()?;
        let mut params = Params::zeros(&spec);
        for r in 0..spec.num_prototypes {
            params.prototypes.set(r, r % spec.proj_dim, 1.0);
        }
        let velocity = params.zeros_like();
        Ok(Self {
            spec,
            params,
            velocity,
            sgd,
        })
    }

    pub fn from_params(spec: ModelSpec, params: Params, sgd: SgdConfig) -> Result<Self> {
        spec.validate()?;
        if !Params::zeros(&spec).same_layout(&params) {
            return Err(Error::shape("ModelState::from_params", "layout does not match spec"));
        }
        let velocity = params.zeros_like();
        Ok(Self {
            spec,
            params,
            velocity,
            sgd,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn velocity(&self) -> &Params {
        &self.velocity
    }

    pub(crate) fn set_velocity(&mut self, velocity: Params) -> Result<()> {
        if !self.params.same_layout(&velocity) {
            return Err(Error::shape("ModelState::set_velocity", "layout mismatch"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardOut> {
        Ok(self.forward_cached(x)?.out)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                format!("input has {} columns, model expects {}", x.cols(), self.spec.input_dim),
            ));
        }
        let mut activations = Vec::with_capacity(self.params.hidden.len() + 1);
        let mut h = x.clone();
        for layer in &self.params.hidden {
            let next = layer.forward(&h)?.map(f64::tanh);
            activations.push(h);
            h = next;
        }
        let class_logits = self.params.class_head.forward(&h)?;
        let class_probs = softmax_rows(&class_logits);
        let raw = self.params.proj_head.forward(&h)?;
        let (embedding, proj_norms) = l2_normalize_rows(&raw, NORM_FLOOR);
        let proto_similarity = matmul(&embedding, &self.params.prototypes.transpose())?;
        let proto_scores = proto_similarity.scale(1.0 / self.spec.temp_proto);
        let proto_probs = softmax_rows(&proto_scores);
        activations.push(h);
        Ok(ForwardCache {
            activations,
            proj_norms,
            out: ForwardOut {
                class_logits,
                class_probs,
                embedding,
                proto_similarity,
                proto_scores,
                proto_probs,
            },
        })
    }

    /// Parameter gradients given upstream gradients on the class logits
    /// and/or the prototype scores of a cached forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: Option<&Matrix>,
        d_scores: Option<&Matrix>,
    ) -> Result<Params> {
        let mut grads = self.params.zeros_like();
        let trunk = cache.activations.last().expect("trunk output cached");
        let mut d_trunk = Matrix::zeros(trunk.rows(), trunk.cols());

        if let Some(dl) = d_logits {
            let (g, dx) = self.params.class_head.backward(trunk, dl)?;
            grads.class_head = g;
            d_trunk.add_scaled_in_place(&dx, 1.0)?;
        }
        if let Some(ds) = d_scores {
            let inv_t = 1.0 / self.spec.temp_proto;
            let d_sim = ds.scale(inv_t);
            let emb = &cache.out.embedding;
            // sim = E P^T
            let d_emb = matmul(&d_sim, &self.params.prototypes)?;
            grads.prototypes = matmul(&d_sim.transpose(), emb)?;
            let d_raw = l2_normalize_rows_backward(emb, &cache.proj_norms, NORM_FLOOR, &d_emb)?;
            let (g, dx) = self.params.proj_head.backward(trunk, &d_raw)?;
            grads.proj_head = g;
            d_trunk.add_scaled_in_place(&dx, 1.0)?;
        }
        if d_logits.is_none() && d_scores.is_none() {
            return Ok(grads);
        }

        let mut d_h = d_trunk;
        for i in (0..self.params.hidden.len()).rev() {
            let out = &cache.activations[i + 1];
            let d_pre = d_h.hadamard(&out.map(|t| 1.0 - t * t))?;
            let (g, dx) = self.params.hidden[i].backward(&cache.activations[i], &d_pre)?;
            grads.hidden[i] = g;
            d_h = dx;
        }
        Ok(grads)
    }

    /// Argmax label, max probability and gate per row, under stop-gradient.
    pub fn predict_confident(&self, x: &Matrix, thresholds: &[f64]) -> Result<Vec<Confidence>> {
        confidence_from_probs(&self.forward(x)?.class_probs, thresholds)
    }

    /// One momentum-SGD step with weight decay, then prototype re-normalization.
    pub fn sgd_step(&mut self, grads: &Params) -> Result<()> {
        if !self.params.same_layout(grads) {
            return Err(Error::shape("sgd_step", "gradient layout does not match parameters"));
        }
        for (name, g) in grads.named() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        let cfg = self.sgd.clone();
        for (((_, p), (_, v)), (_, g)) in self
            .params
            .named_mut()
            .into_iter()
            .zip(self.velocity.named_mut())
            .zip(grads.named())
        {
            sgd_update(p, g, v, &cfg);
        }
        normalize_rows_in_place(&mut self.params.prototypes);
        Ok(())
    }
}
