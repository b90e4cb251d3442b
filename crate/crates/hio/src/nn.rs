//! Minimal deterministic feedforward network engine.
//!
//! Dense layers over `f64`, ReLU/Softmax/Identity activations, categorical
//! cross-entropy (summed over samples, not averaged), exact analytic
//! gradients, plain SGD, and bit-exact parameter snapshot/restore. Given the
//! same seed and architecture, every operation here is bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// True-class probabilities are clamped to this floor before taking the log,
/// so a confidently wrong prediction yields a large finite loss, never NaN.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("cannot pop the last layer of a single-layer network")]
    CannotPop,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("probability vector does not sum to 1 (sum = {0})")]
    NotNormalized(f64),
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model format: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Softmax,
    Identity,
}

/// A dense layer `y = act(W^T x + b)` with weights stored row-major as
/// `[fan_in x fan_out]` (`weights[i * fan_out + j]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        // Glorot-style scaled uniform; biases start at zero.
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        DenseLayer {
            fan_in,
            fan_out,
            weights,
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    fn activate(&self, z: &mut [f64]) {
        match self.activation {
            Activation::Identity => {}
            Activation::ReLU => {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Softmax => softmax_in_place(z),
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// SGD training hyperparameters. Loss is summed over samples, so learning
/// rates are calibrated against sum semantics, not mean semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub checkpoint_interval_epochs: u32,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: None,
            checkpoint_interval_epochs: 10,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(NnError::InvalidArchitecture(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.checkpoint_interval_epochs == 0 {
            return Err(NnError::InvalidArchitecture(
                "checkpoint_interval_epochs must be at least 1".into(),
            ));
        }
        if self.batch_size == Some(0) {
            return Err(NnError::InvalidArchitecture(
                "batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// An ordered stack of dense layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    layer_sizes: Vec<usize>,
}

/// Per-layer parameter gradients, shape-congruent with the owning [`Mlp`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>, // (dW, db) per layer
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(dw, db)| dw.iter().all(|v| v.is_finite()) && db.iter().all(|v| v.is_finite()))
    }
}

/// Bit-exact deep copy of an [`Mlp`]'s parameters at step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    layer_sizes: Vec<usize>,
    params: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Per-sample forward trace: the input plus every layer's pre-activation and
/// activation, as needed by the backward pass.
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has at least one layer")
    }
}

impl Mlp {
    /// Builds a seeded network. `hidden_activation` applies to every layer but
    /// the last, which gets `output_activation`. Same seed and sizes produce a
    /// bit-identical parameter set.
    pub fn init(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Mlp> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidArchitecture(format!(
                "need at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidArchitecture(
                "layer sizes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    output_activation
                } else {
                    hidden_activation
                };
                DenseLayer::init(layer_sizes[i], layer_sizes[i + 1], act, &mut rng)
            })
            .collect();
        Ok(Mlp {
            layers,
            layer_sizes: layer_sizes.to_vec(),
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.post.pop().unwrap())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                context: "forward input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let mut z = vec![0.0; layer.fan_out];
            layer.affine(cur, &mut z);
            pre.push(z.clone());
            layer.activate(&mut z);
            post.push(z);
            cur = post.last().unwrap();
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre,
            post,
        })
    }

    /// Backward pass from an upstream gradient w.r.t. the network output.
    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. the input, so networks can be chained.
    pub fn backward_from_output(
        &self,
        trace: &ForwardTrace,
        d_output: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if d_output.len() != self.output_dim() {
            return Err(NnError::ShapeMismatch {
                context: "backward upstream gradient",
                expected: self.output_dim(),
                actual: d_output.len(),
            });
        }
        let mut dy = d_output.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let y = &trace.post[idx];
            let z = &trace.pre[idx];
            // Gradient through the activation.
            let dz: Vec<f64> = match layer.activation {
                Activation::Identity => dy.clone(),
                Activation::ReLU => z
                    .iter()
                    .zip(&dy)
                    .map(|(&zi, &d)| if zi > 0.0 { d } else { 0.0 })
                    .collect(),
                Activation::Softmax => {
                    let dot: f64 = y.iter().zip(&dy).map(|(&p, &d)| p * d).sum();
                    y.iter().zip(&dy).map(|(&p, &d)| p * (d - dot)).collect()
                }
            };
            let x = if idx == 0 {
                &trace.input
            } else {
                &trace.post[idx - 1]
            };
            let (dw, db) = &mut grads.layers[idx];
            for (j, &dzj) in dz.iter().enumerate() {
                db[j] += dzj;
            }
            for (i, &xi) in x.iter().enumerate() {
                let row = &mut dw[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (r, &dzj) in row.iter_mut().zip(&dz) {
                    *r += xi * dzj;
                }
            }
            let mut dx = vec![0.0; layer.fan_in];
            for (i, dxi) in dx.iter_mut().enumerate() {
                let row = &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                *dxi = row.iter().zip(&dz).map(|(&w, &dzj)| w * dzj).sum();
            }
            dy = dx;
        }
        Ok(dy)
    }

    /// Exact analytic gradients of the summed cross-entropy loss over a batch.
    pub fn backward(&self, xs: &[Vec<f64>], labels: &[usize]) -> Result<Gradients> {
        if xs.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if xs.len() != labels.len() {
            return Err(NnError::ShapeMismatch {
                context: "batch labels",
                expected: xs.len(),
                actual: labels.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        for (x, &y) in xs.iter().zip(labels) {
            let trace = self.forward_trace(x)?;
            let probs = trace.output();
            if y >= probs.len() {
                return Err(NnError::LabelOutOfRange {
                    label: y,
                    classes: probs.len(),
                });
            }
            let mut d_out = vec![0.0; probs.len()];
            d_out[y] = -1.0 / probs[y].max(LOG_CLAMP);
            self.backward_from_output(&trace, &d_out, &mut grads)?;
        }
        Ok(grads)
    }

    /// `w <- w - lr * grad` on every parameter. Rejects non-finite gradients
    /// before touching anything.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch {
                context: "gradient layers",
                expected: self.layers.len(),
                actual: grads.layers.len(),
            });
        }
        for (layer, (dw, db)) in self.layers.iter().zip(&grads.layers) {
            if dw.len() != layer.weights.len() || db.len() != layer.bias.len() {
                return Err(NnError::ShapeMismatch {
                    context: "gradient shape",
                    expected: layer.weights.len(),
                    actual: dw.len(),
                });
            }
        }
        if !grads.is_finite() {
            return Err(NnError::NonFinite("gradients"));
        }
        for (layer, (dw, db)) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, &g) in layer.weights.iter_mut().zip(dw) {
                *w -= learning_rate * g;
            }
            for (b, &g) in layer.bias.iter_mut().zip(db) {
                *b -= learning_rate * g;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, step: u64) -> Snapshot {
        Snapshot {
            step,
            layer_sizes: self.layer_sizes.clone(),
            params: self
                .layers
                .iter()
                .map(|l| (l.weights.clone(), l.bias.clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        if snapshot.layer_sizes != self.layer_sizes {
            return Err(NnError::ShapeMismatch {
                context: "snapshot restore",
                expected: self.layer_sizes.len(),
                actual: snapshot.layer_sizes.len(),
            });
        }
        for (layer, (w, b)) in self.layers.iter_mut().zip(&snapshot.params) {
            layer.weights.copy_from_slice(w);
            layer.bias.copy_from_slice(b);
        }
        Ok(())
    }

    /// Returns the trunk ending at the penultimate layer. The trunk's output
    /// activation is whatever the penultimate layer had (ReLU in the
    /// architectures used here).
    pub fn pop_last_layer(&self) -> Result<Mlp> {
        if self.layers.len() < 2 {
            return Err(NnError::CannotPop);
        }
        Ok(Mlp {
            layers: self.layers[..self.layers.len() - 1].to_vec(),
            layer_sizes: self.layer_sizes[..self.layer_sizes.len() - 1].to_vec(),
        })
    }

    /// Summed cross-entropy of this network's outputs over a labeled set.
    pub fn loss_on(&self, xs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let mut probs = Vec::with_capacity(xs.len());
        for x in xs {
            probs.push(self.forward(x)?);
        }
        cross_entropy_loss(&probs, labels)
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn accuracy_on(&self, xs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if xs.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let mut hits = 0usize;
        for (x, &y) in xs.iter().zip(labels) {
            if argmax(&self.forward(x)?) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / xs.len() as f64)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Mlp> {
        let text = std::fs::read_to_string(path)?;
        let mlp: Mlp = serde_json::from_str(&text)?;
        mlp.validate()?;
        Ok(mlp)
    }

    fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() != self.layers.len() + 1 {
            return Err(NnError::InvalidArchitecture(
                "layer_sizes inconsistent with layer count".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.fan_in != self.layer_sizes[i]
                || layer.fan_out != self.layer_sizes[i + 1]
                || layer.weights.len() != layer.fan_in * layer.fan_out
                || layer.bias.len() != layer.fan_out
            {
                return Err(NnError::InvalidArchitecture(format!(
                    "layer {i} shape inconsistent"
                )));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("loaded parameters"));
            }
        }
        Ok(())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Summed categorical cross-entropy: `sum_i -log(p_i[y_i])`, with the
/// true-class probability clamped to [`LOG_CLAMP`].
pub fn cross_entropy_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(NnError::ShapeMismatch {
            context: "loss labels",
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(NnError::LabelOutOfRange {
                label: y,
                classes: p.len(),
            });
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NnError::NotNormalized(sum));
        }
        total -= p[y].max(LOG_CLAMP).ln();
    }
    Ok(total)
}
