//! Trainable dense classification head.
//!
//! The head maps an embedding `x` of dimension `E` to `C` logits through a
//! single fully-connected layer, followed by softmax. It is the only trainable
//! state in the system: the feature extractor that produced `x` is frozen and
//! lives upstream.
//!
//! All arithmetic is `f64`. Parameters are stored row-major by class, so row
//! `c` of the weight matrix is `weights[c * E..(c + 1) * E]`.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::federation::ModelBlob;

/// Learning rate used when none is configured.
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

/// Lower clamp applied to the true-class probability inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Head dimensions: embedding width and number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadShape {
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl HeadShape {
    /// MobileNetV2 (alpha 0.35) embedding with a binary head: 2562 parameters.
    pub const TF_MOBILENET: HeadShape = HeadShape::new(1280, 2);
    /// MLPerf Tiny visual-wake-words MobileNet with a binary head: 514 parameters.
    pub const PERF_MOBILENET: HeadShape = HeadShape::new(256, 2);

    pub const fn new(embedding_dim: usize, num_classes: usize) -> Self {
        Self {
            embedding_dim,
            num_classes,
        }
    }

    pub const fn param_count(&self) -> usize {
        self.num_classes * self.embedding_dim + self.num_classes
    }

    fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.num_classes == 0 {
            return Err(Error::usage(format!(
                "head dimensions must be positive (E={}, C={})",
                self.embedding_dim, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Bytes of float32 parameter storage for a head of the given shape.
///
/// Depends only on the shape, never on how much data the head has seen.
pub fn footprint_bytes(embedding_dim: usize, num_classes: usize) -> usize {
    4 * HeadShape::new(embedding_dim, num_classes).param_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl EmbeddingSample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// How to fill a freshly created head.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// I.i.d. uniform in `[-s, s]`, `s = sqrt(6 / (E + C))`, from a seeded ChaCha8 stream.
    Random {
        seed: u64,
    },
    Zeros,
    Pretrained(ModelBlob),
}

impl InitMode {
    pub fn label(&self) -> &'static str {
        match self {
            InitMode::Random { .. } => "random",
            InitMode::Zeros => "zeros",
            InitMode::Pretrained(_) => "pretrained",
        }
    }
}

/// Parameter gradients of the loss, shaped like the head they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    shape: HeadShape,
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros(shape: HeadShape) -> Self {
        Self {
            shape,
            d_weights: vec![0.0; shape.num_classes * shape.embedding_dim],
            d_bias: vec![0.0; shape.num_classes],
        }
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    /// Outer product `delta ⊗ x` plus `delta` for the bias.
    fn outer(shape: HeadShape, delta: &[f64], x: &[f64]) -> Self {
        let mut d_weights = Vec::with_capacity(shape.num_classes * shape.embedding_dim);
        for &d in delta {
            d_weights.extend(x.iter().map(|&xe| d * xe));
        }
        Self {
            shape,
            d_weights,
            d_bias: delta.to_vec(),
        }
    }

    fn add_outer(&mut self, delta: &[f64], x: &[f64]) {
        let e = self.shape.embedding_dim;
        for (c, &d) in delta.iter().enumerate() {
            let row = &mut self.d_weights[c * e..(c + 1) * e];
            for (w, &xe) in row.iter_mut().zip(x) {
                *w += d * xe;
            }
            self.d_bias[c] += d;
        }
    }

    fn scale_inv(&mut self, n: f64) {
        for g in self.d_weights.iter_mut().chain(self.d_bias.iter_mut()) {
            *g /= n;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.d_weights.iter().chain(self.d_bias.iter()).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    shape: HeadShape,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseHead {
    pub fn zeros(embedding_dim: usize, num_classes: usize) -> Result<Self> {
        Self::init(embedding_dim, num_classes, &InitMode::Zeros)
    }

    pub fn init(embedding_dim: usize, num_classes: usize, mode: &InitMode) -> Result<Self> {
        let shape = HeadShape::new(embedding_dim, num_classes);
        shape.validate()?;
        let n_weights = num_classes * embedding_dim;
        match mode {
            InitMode::Zeros => Ok(Self {
                shape,
                weights: vec![0.0; n_weights],
                bias: vec![0.0; num_classes],
            }),
            InitMode::Random { seed } => {
                let s = (6.0 / (embedding_dim + num_classes) as f64).sqrt();
                let dist = Uniform::new_inclusive(-s, s);
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let weights = (0..n_weights).map(|_| dist.sample(&mut rng)).collect();
                let bias = (0..num_classes).map(|_| dist.sample(&mut rng)).collect();
                Ok(Self { shape, weights, bias })
            }
            InitMode::Pretrained(blob) => {
                if blob.values().len() != shape.param_count() {
                    return Err(Error::Shape {
                        what: "pretrained blob",
                        expected: shape.param_count(),
                        got: blob.values().len(),
                    });
                }
                if blob.shape() != shape {
                    return Err(Error::usage(format!(
                        "pretrained blob has shape {:?}, head wants {:?}",
                        blob.shape(),
                        shape
                    )));
                }
                Self::from_flat(shape, blob.values())
            }
        }
    }

    /// Builds a head from explicit parameters (weights row-major `C x E`).
    pub fn from_parts(embedding_dim: usize, num_classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let shape = HeadShape::new(embedding_dim, num_classes);
        shape.validate()?;
        if weights.len() != num_classes * embedding_dim {
            return Err(Error::Shape {
                what: "weights",
                expected: num_classes * embedding_dim,
                got: weights.len(),
            });
        }
        if bias.len() != num_classes {
            return Err(Error::Shape {
                what: "bias",
                expected: num_classes,
                got: bias.len(),
            });
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { shape, weights, bias })
    }

    /// Inverse of [`DenseHead::flat_params`].
    pub(crate) fn from_flat(shape: HeadShape, flat: &[f64]) -> Result<Self> {
        let n_weights = shape.num_classes * shape.embedding_dim;
        Self::from_parts(
            shape.embedding_dim,
            shape.num_classes,
            flat[..n_weights].to_vec(),
            flat[n_weights..].to_vec(),
        )
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.shape.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Canonical parameter order: weight rows by class, then bias.
    pub fn flat_params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(self.bias.iter()).copied()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.embedding_dim {
            return Err(Error::Shape {
                what: "embedding",
                expected: self.shape.embedding_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.shape.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.shape.num_classes,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.logits_unchecked(x))
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.shape.embedding_dim)
            .zip(&self.bias)
            .map(|(row, &b)| b + row.iter().zip(x).map(|(w, xe)| w * xe).sum::<f64>())
            .collect()
    }

    /// Predicted class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Loss of a single sample under the current parameters.
    pub fn loss(&self, sample: &EmbeddingSample) -> Result<f64> {
        let probs = softmax(&self.forward(&sample.features)?);
        cross_entropy(&probs, sample.label)
    }

    /// Gradient of softmax cross-entropy given the softmax output for `x`.
    pub fn backward(&self, x: &[f64], probs: &[f64], label: usize) -> Result<Gradients> {
        self.check_input(x)?;
        self.check_label(label)?;
        if probs.len() != self.shape.num_classes {
            return Err(Error::Shape {
                what: "probabilities",
                expected: self.shape.num_classes,
                got: probs.len(),
            });
        }
        let delta = output_delta(probs, label);
        Ok(Gradients::outer(self.shape, &delta, x))
    }

    /// Forward, softmax and backward for one sample.
    pub fn sample_gradients(&self, sample: &EmbeddingSample) -> Result<Gradients> {
        let probs = softmax(&self.forward(&sample.features)?);
        self.backward(&sample.features, &probs, sample.label)
    }

    /// `p <- p - lr * g` for every parameter.
    ///
    /// The head is left untouched if the step is rejected.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::usage(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if grads.shape != self.shape
            || grads.d_weights.len() != self.weights.len()
            || grads.d_bias.len() != self.bias.len()
        {
            return Err(Error::Shape {
                what: "gradients",
                expected: self.param_count(),
                got: grads.d_weights.len() + grads.d_bias.len(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let step = |p: &f64, g: &f64| p - lr * g;
        let weights: Vec<f64> = self
            .weights
            .iter()
            .zip(&grads.d_weights)
            .map(|(p, g)| step(p, g))
            .collect();
        let bias: Vec<f64> = self.bias.iter().zip(&grads.d_bias).map(|(p, g)| step(p, g)).collect();
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Numeric("update overflowed".into()));
        }
        self.weights = weights;
        self.bias = bias;
        Ok(())
    }

    /// Mean gradient over `batch`, accumulated in sample order.
    pub fn batch_gradients(&self, batch: &[EmbeddingSample]) -> Result<Gradients> {
        let (first, rest) = batch.split_first().ok_or_else(|| Error::usage("empty batch"))?;
        let mut acc = self.sample_gradients(first)?;
        for sample in rest {
            self.check_input(&sample.features)?;
            self.check_label(sample.label)?;
            let probs = softmax(&self.logits_unchecked(&sample.features));
            acc.add_outer(&output_delta(&probs, sample.label), &sample.features);
        }
        acc.scale_inv(batch.len() as f64);
        Ok(acc)
    }

    /// Runs `local_episodes` full-batch SGD steps on `batch`.
    pub fn train_batch(&mut self, batch: &[EmbeddingSample], lr: f64, local_episodes: usize) -> Result<()> {
        if local_episodes == 0 {
            return Err(Error::usage("local_episodes must be at least 1"));
        }
        if batch.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        for _ in 0..local_episodes {
            let grads = self.batch_gradients(batch)?;
            self.sgd_step(&grads, lr)?;
        }
        Ok(())
    }
}

fn output_delta(probs: &[f64], label: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| if c == label { p - 1.0 } else { p })
        .collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln(max(probs[label], PROB_CLAMP))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or(Error::LabelOutOfRange {
        label,
        num_classes: probs.len(),
    })?;
    Ok(-p.max(PROB_CLAMP).ln())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
