//! Feed-forward classifier with inverted dropout.
//!
//! Weights of a layer are stored as an `out x in` row-major [`Matrix`]. A
//! dropout mask is attached to the *input* of every fully-connected layer
//! (features into the first layer, hidden activations into the rest); the
//! logits are never masked. Retained units are scaled by `1 / (1 - p)`, so
//! the deterministic forward pass is already the expected network and the
//! baseline needs no test-time rescaling.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::{self, domain};
use crate::uncertainty::McPrediction;
use crate::{Error, Result, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu if z > 0.0 => 1.0,
            Activation::Relu => 0.0,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// An ordered stack of layers whose dimensions chain and whose last layer
/// emits logits.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidInput("network has no layers".into()));
        };
        if last.activation != Activation::Identity {
            return Err(Error::InvalidInput(
                "final layer must use the identity activation".into(),
            ));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layer.out_dim(),
                    got: layer.bias.len(),
                });
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidInput(format!("layer {k} bias is not finite")));
            }
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::InvalidInput(format!(
                    "layer {k} has a zero dimension"
                )));
            }
            if let Some(next) = layers.get(k + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: layer.out_dim(),
                        got: next.in_dim(),
                    });
                }
            }
        }
        Ok(Self { layers })
    }

    /// He-style Gaussian initialisation: `N(0, 2 / fan_in)` weights, zero
    /// biases. Hidden layers use ReLU, the last layer is linear.
    pub fn init(arch: &[usize], seed: u64) -> Result<Self> {
        if arch.len() < 2 {
            return Err(Error::InvalidInput(
                "architecture needs at least input and output sizes".into(),
            ));
        }
        let n_layers = arch.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (k, dims) in arch.windows(2).enumerate() {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::InvalidInput("layer sizes must be positive".into()));
            }
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive and finite");
            let mut rng = rng::stream(seed, &[domain::INIT, k as u64]);
            let data = (0..fan_in * fan_out)
                .map(|_| normal.sample(&mut rng))
                .collect();
            layers.push(Layer {
                weights: Matrix::new(fan_out, fan_in, data)?,
                bias: vec![0.0; fan_out],
                activation: if k + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer sizes `[in, hidden.., out]`.
    pub fn arch(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    /// Sum of squared weights and biases.
    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.data().iter().map(|w| w * w).sum::<f64>()
                    + l.bias.iter().map(|b| b * b).sum::<f64>()
            })
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights
                .data()
                .iter()
                .chain(&l.bias)
                .all(|v| v.is_finite())
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    pub fn to_json(&self) -> String {
        let doc = ParamsDoc {
            version: PARAMS_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    rows: l.out_dim(),
                    cols: l.in_dim(),
                    weights: l.weights.data().to_vec(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDoc =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("params: {e}")))?;
        if doc.version != PARAMS_VERSION {
            return Err(Error::Format(format!(
                "unsupported params version {}",
                doc.version
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    weights: Matrix::new(l.rows, l.cols, l.weights)?,
                    bias: l.bias,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    fn apply_step(&mut self, grads: &Gradients, learning_rate: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, dw) in layer.weights.data_mut().iter_mut().zip(&g.weights) {
                *w -= learning_rate * dw;
            }
            for (b, db) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= learning_rate * db;
            }
        }
    }
}

const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    version: u32,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("logits must be finite".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Keep/drop flags for the input of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    p: f64,
    keep: Vec<Vec<bool>>,
}

impl DropoutMasks {
    /// Masks that retain every unit (still scaled by `1 / (1 - p)`).
    pub fn all_kept(params: &NetworkParams, p: f64) -> Result<Self> {
        check_dropout_p(p)?;
        Ok(Self {
            p,
            keep: params
                .layers
                .iter()
                .map(|l| vec![true; l.in_dim()])
                .collect(),
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn layer(&self, k: usize) -> &[bool] {
        &self.keep[k]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.keep
    }

    fn scale(&self) -> f64 {
        1.0 / (1.0 - self.p)
    }
}

fn check_dropout_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "dropout probability {p} not in (0, 1)"
        )))
    }
}

/// Draw Bernoulli(1 - p) keep flags; layer `k` uses the stream
/// `(seed, [MASK_LAYER, k])`.
pub fn sample_dropout_masks(params: &NetworkParams, p: f64, seed: u64) -> Result<DropoutMasks> {
    check_dropout_p(p)?;
    let keep = params
        .layers
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let mut rng = rng::stream(seed, &[domain::MASK_LAYER, k as u64]);
            (0..layer.in_dim())
                .map(|_| rng.random::<f64>() >= p)
                .collect()
        })
        .collect();
    Ok(DropoutMasks { p, keep })
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Deterministic,
    Stochastic(&'a DropoutMasks),
}

/// Per-layer intermediate values kept for backpropagation.
struct Trace {
    /// Masked and scaled input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

fn check_masks(params: &NetworkParams, masks: &DropoutMasks) -> Result<()> {
    if masks.keep.len() != params.layers.len() {
        return Err(Error::DimensionMismatch {
            expected: params.layers.len(),
            got: masks.keep.len(),
        });
    }
    for (layer, keep) in params.layers.iter().zip(&masks.keep) {
        if keep.len() != layer.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: layer.in_dim(),
                got: keep.len(),
            });
        }
    }
    Ok(())
}

fn forward_trace(params: &NetworkParams, x: &[f64], mode: ForwardMode<'_>) -> Result<Trace> {
    if x.len() != params.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.in_dim(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features must be finite".into()));
    }
    if let ForwardMode::Stochastic(masks) = mode {
        check_masks(params, masks)?;
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.to_vec();
    for (k, layer) in params.layers.iter().enumerate() {
        if let ForwardMode::Stochastic(masks) = mode {
            let scale = masks.scale();
            for (v, &keep) in h.iter_mut().zip(&masks.keep[k]) {
                *v = if keep { *v * scale } else { 0.0 };
            }
        }
        let z: Vec<f64> = layer
            .weights
            .iter_rows()
            .zip(&layer.bias)
            .map(|(w, b)| w.iter().zip(&h).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect();
        let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    Ok(Trace { inputs, pre })
}

/// Logits for one feature vector.
pub fn forward(params: &NetworkParams, x: &[f64], mode: ForwardMode<'_>) -> Result<Vec<f64>> {
    let trace = forward_trace(params, x, mode)?;
    Ok(trace.pre.into_iter().last().expect("at least one layer"))
}

/// Deterministic softmax prediction (the baseline).
pub fn predict_proba(params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>> {
    softmax(&forward(params, x, ForwardMode::Deterministic)?)
}

/// Soft-label cross-entropy `-sum y_c ln p_c` with the probability clipped
/// at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            if y == 0.0 {
                0.0
            } else {
                -y * p.max(PROB_FLOOR).ln()
            }
        })
        .sum()
}

/// Gradient of the loss with respect to every parameter, laid out like
/// [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.data().len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Flattened view in the same order as [`flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect()
    }
}

/// All parameters flattened layer by layer, weights before bias.
pub fn flatten_params(params: &NetworkParams) -> Vec<f64> {
    params
        .layers
        .iter()
        .flat_map(|l| l.weights.data().iter().chain(&l.bias).copied())
        .collect()
}

/// Inverse of [`flatten_params`] for a network of the same shape.
pub fn unflatten_params(template: &NetworkParams, flat: &[f64]) -> Result<NetworkParams> {
    if flat.len() != template.num_parameters() {
        return Err(Error::DimensionMismatch {
            expected: template.num_parameters(),
            got: flat.len(),
        });
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(template.layers.len());
    for l in &template.layers {
        let nw = l.weights.data().len();
        let nb = l.bias.len();
        layers.push(Layer {
            weights: Matrix::new(l.out_dim(), l.in_dim(), flat[offset..offset + nw].to_vec())?,
            bias: flat[offset + nw..offset + nw + nb].to_vec(),
            activation: l.activation,
        });
        offset += nw + nb;
    }
    NetworkParams::new(layers)
}

/// A mini-batch of feature rows and soft-label rows, optionally with one
/// frozen mask set per sample.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [&'a [f64]],
    pub labels: &'a [&'a [f64]],
    pub masks: Option<&'a [DropoutMasks]>,
}

impl Batch<'_> {
    fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        if self.labels.len() != self.features.len() {
            return Err(Error::DimensionMismatch {
                expected: self.features.len(),
                got: self.labels.len(),
            });
        }
        if let Some(m) = self.masks {
            if m.len() != self.features.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.features.len(),
                    got: m.len(),
                });
            }
        }
        Ok(())
    }

    fn mode(&self, i: usize) -> ForwardMode<'_> {
        match self.masks {
            Some(m) => ForwardMode::Stochastic(&m[i]),
            None => ForwardMode::Deterministic,
        }
    }
}

/// Mean soft-label cross-entropy over the batch plus
/// `weight_decay * ||theta||^2`.
pub fn loss(params: &NetworkParams, batch: &Batch<'_>, weight_decay: f64) -> Result<f64> {
    batch.validate()?;
    let mut total = 0.0;
    for (i, (x, y)) in batch.features.iter().zip(batch.labels).enumerate() {
        check_label(params, y)?;
        let probs = softmax(&forward(params, x, batch.mode(i))?)?;
        total += cross_entropy(&probs, y);
    }
    Ok(total / batch.features.len() as f64 + weight_decay * params.squared_norm())
}

fn check_label(params: &NetworkParams, y: &[f64]) -> Result<()> {
    if y.len() != params.out_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.out_dim(),
            got: y.len(),
        });
    }
    Ok(())
}

/// Loss and its analytic gradient by backpropagation.
pub fn loss_and_gradient(
    params: &NetworkParams,
    batch: &Batch<'_>,
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    batch.validate()?;
    let n = batch.features.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    for (i, (x, y)) in batch.features.iter().zip(batch.labels).enumerate() {
        check_label(params, y)?;
        let mode = batch.mode(i);
        let trace = forward_trace(params, x, mode)?;
        let probs = softmax(trace.pre.last().expect("at least one layer"))?;
        total += cross_entropy(&probs, y);

        // d/dz of -sum_c y_c log softmax(z)_c = p * sum(y) - y
        let y_sum: f64 = y.iter().sum();
        let mut delta: Vec<f64> = probs
            .iter()
            .zip(y.iter())
            .map(|(p, t)| (p * y_sum - t) / n)
            .collect();

        for k in (0..params.layers.len()).rev() {
            let layer = &params.layers[k];
            let input = &trace.inputs[k];
            let g = &mut grads.layers[k];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim()..(o + 1) * layer.in_dim()];
                for (gw, h) in row.iter_mut().zip(input) {
                    *gw += d * h;
                }
            }
            if k == 0 {
                break;
            }
            let mut back = vec![0.0; layer.in_dim()];
            for (w_row, d) in layer.weights.iter_rows().zip(&delta) {
                for (b, w) in back.iter_mut().zip(w_row) {
                    *b += w * d;
                }
            }
            if let ForwardMode::Stochastic(masks) = mode {
                let scale = masks.scale();
                for (b, &keep) in back.iter_mut().zip(&masks.keep[k]) {
                    *b = if keep { *b * scale } else { 0.0 };
                }
            }
            let prev = &params.layers[k - 1];
            for (b, &z) in back.iter_mut().zip(&trace.pre[k - 1]) {
                *b *= prev.activation.derivative(z);
            }
            delta = back;
        }
    }

    if weight_decay != 0.0 {
        for (layer, g) in params.layers.iter().zip(grads.layers.iter_mut()) {
            for (gw, w) in g.weights.iter_mut().zip(layer.weights.data()) {
                *gw += 2.0 * weight_decay * w;
            }
            for (gb, b) in g.bias.iter_mut().zip(&layer.bias) {
                *gb += 2.0 * weight_decay * b;
            }
        }
    }
    Ok((total / n + weight_decay * params.squared_norm(), grads))
}

fn default_dropout_p() -> f64 {
    0.5
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_mc_samples() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_dropout_p")]
    pub dropout_p: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// `None` means `(1 - dropout_p) / (2 N)` for a training set of size N.
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dropout_p: default_dropout_p(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            weight_decay: None,
            seed: 0,
            mc_samples: default_mc_samples(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dropout_p > 0.0 && self.dropout_p < 1.0) {
            return bad("dropout_p must be in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if let Some(wd) = self.weight_decay {
            if !(wd >= 0.0 && wd.is_finite()) {
                return bad("weight_decay must be non-negative");
            }
        }
        Ok(())
    }

    pub fn effective_weight_decay(&self, n_train: usize) -> f64 {
        self.weight_decay
            .unwrap_or_else(|| (1.0 - self.dropout_p) / (2.0 * n_train.max(1) as f64))
    }
}

/// Features with soft-label targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    soft_labels: Matrix,
    sample_ids: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, soft_labels: Matrix, sample_ids: Vec<String>) -> Result<Self> {
        let n = features.rows();
        if n == 0 || features.cols() == 0 || soft_labels.cols() == 0 {
            return Err(Error::EmptyInput("dataset"));
        }
        if soft_labels.rows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: soft_labels.rows(),
            });
        }
        if sample_ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: sample_ids.len(),
            });
        }
        for (i, row) in soft_labels.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "soft label of sample {} is not a probability vector",
                    sample_ids[i]
                )));
            }
        }
        Ok(Self {
            features,
            soft_labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn soft_labels(&self) -> &Matrix {
        &self.soft_labels
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean mini-batch loss of each epoch.
    pub loss_trace: Vec<f64>,
    pub weight_decay: f64,
}

/// Mini-batch SGD with a fresh dropout mask per sample and batch.
///
/// `arch` lists every layer size, input and output included. The run is a
/// pure function of its inputs and `config.seed`.
pub fn train(dataset: &Dataset, config: &TrainConfig, arch: &[usize]) -> Result<TrainOutcome> {
    config.validate()?;
    if arch.first() != Some(&dataset.features.cols()) {
        return Err(Error::DimensionMismatch {
            expected: dataset.features.cols(),
            got: arch.first().copied().unwrap_or(0),
        });
    }
    if arch.last() != Some(&dataset.soft_labels.cols()) {
        return Err(Error::DimensionMismatch {
            expected: dataset.soft_labels.cols(),
            got: arch.last().copied().unwrap_or(0),
        });
    }
    let mut params = NetworkParams::init(arch, config.seed)?;
    let weight_decay = config.effective_weight_decay(dataset.len());
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng::stream(config.seed, &[domain::SHUFFLE, epoch as u64]);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let features: Vec<&[f64]> = chunk.iter().map(|&i| dataset.features.row(i)).collect();
            let labels: Vec<&[f64]> = chunk.iter().map(|&i| dataset.soft_labels.row(i)).collect();
            let masks = (0..chunk.len())
                .map(|j| {
                    let seed = rng::derive_seed(
                        config.seed,
                        &[domain::TRAIN_DROPOUT, epoch as u64, b as u64, j as u64],
                    );
                    sample_dropout_masks(&params, config.dropout_p, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch {
                features: &features,
                labels: &labels,
                masks: Some(&masks),
            };
            // inputs were validated up front, so a failure here is overflow
            let (value, grads) = loss_and_gradient(&params, &batch, weight_decay)
                .map_err(|_| Error::TrainingDiverged { epoch: epoch + 1 })?;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            params.apply_step(&grads, config.learning_rate);
            if !params.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            epoch_loss += value;
            n_batches += 1;
        }
        let mean = epoch_loss / n_batches as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        loss_trace.push(mean);
    }

    Ok(TrainOutcome {
        params,
        loss_trace,
        weight_decay,
    })
}

/// Softmax rows of the given stochastic passes.
pub fn mc_predict_with_masks(
    params: &NetworkParams,
    x: &[f64],
    masks: &[DropoutMasks],
) -> Result<McPrediction> {
    let rows = masks
        .iter()
        .map(|m| softmax(&forward(params, x, ForwardMode::Stochastic(m))?))
        .collect::<Result<Vec<_>>>()?;
    McPrediction::from_rows("", &rows)
}

/// `passes` stochastic forward passes; pass `t` draws its masks from the
/// derived seed `(seed, [MC_DROPOUT, t])`.
pub fn mc_predict(
    params: &NetworkParams,
    x: &[f64],
    passes: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<McPrediction> {
    if passes == 0 {
        return Err(Error::InvalidInput(
            "MC prediction needs at least one pass".into(),
        ));
    }
    let masks = (0..passes)
        .map(|t| {
            sample_dropout_masks(
                params,
                dropout_p,
                rng::derive_seed(seed, &[domain::MC_DROPOUT, t as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    mc_predict_with_masks(params, x, &masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net() -> NetworkParams {
        NetworkParams::new(vec![Layer {
            weights: Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn identity_forward() {
        let net = identity_net();
        assert_eq!(
            forward(&net, &[1.0, 2.0], ForwardMode::Deterministic).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(matches!(
            forward(&net, &[1.0], ForwardMode::Deterministic),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn all_kept_masks_scale_inputs() {
        let net = identity_net();
        let masks = DropoutMasks::all_kept(&net, 0.2).unwrap();
        let z = forward(&net, &[1.0, 2.0], ForwardMode::Stochastic(&masks)).unwrap();
        assert!((z[0] - 1.25).abs() < 1e-15);
        assert!((z[1] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn network_validation() {
        let relu_out = NetworkParams::new(vec![Layer {
            weights: Matrix::zeros(2, 2),
            bias: vec![0.0; 2],
            activation: Activation::Relu,
        }]);
        assert!(relu_out.is_err());
        let broken_chain = NetworkParams::new(vec![
            Layer {
                weights: Matrix::zeros(3, 2),
                bias: vec![0.0; 3],
                activation: Activation::Relu,
            },
            Layer {
                weights: Matrix::zeros(2, 4),
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            },
        ]);
        assert!(matches!(broken_chain, Err(Error::DimensionMismatch { .. })));
        assert!(NetworkParams::new(vec![]).is_err());
    }

    #[test]
    fn init_shapes_and_activations() {
        let net = NetworkParams::init(&[3, 5, 4, 2], 1).unwrap();
        assert_eq!(net.arch(), vec![3, 5, 4, 2]);
        assert_eq!(net.layers()[0].activation, Activation::Relu);
        assert_eq!(net.layers()[2].activation, Activation::Identity);
        assert!(net
            .layers()
            .iter()
            .all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(net, NetworkParams::init(&[3, 5, 4, 2], 1).unwrap());
        assert_ne!(net, NetworkParams::init(&[3, 5, 4, 2], 2).unwrap());
    }

    #[test]
    fn loss_examples() {
        let net = identity_net();
        // logits (1000, 0) give a numerically exact one-hot
        let x: &[f64] = &[1000.0, 0.0];
        let y: &[f64] = &[1.0, 0.0];
        let batch = Batch {
            features: &[x],
            labels: &[y],
            masks: None,
        };
        assert_eq!(loss(&net, &batch, 0.0).unwrap(), 0.0);

        let uniform = NetworkParams::new(vec![Layer {
            weights: Matrix::zeros(4, 2),
            bias: vec![0.0; 4],
            activation: Activation::Identity,
        }])
        .unwrap();
        let y4: &[f64] = &[0.0, 0.0, 1.0, 0.0];
        let batch = Batch {
            features: &[x],
            labels: &[y4],
            masks: None,
        };
        assert!((loss(&uniform, &batch, 0.0).unwrap() - 4f64.ln()).abs() < 1e-15);
        let empty = Batch {
            features: &[],
            labels: &[],
            masks: None,
        };
        assert!(matches!(
            loss(&uniform, &empty, 0.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn params_json_round_trip() {
        let net = NetworkParams::init(&[2, 3, 2], 9).unwrap();
        let text = net.to_json();
        assert!(text.contains("\"version\": 1"));
        assert_eq!(NetworkParams::from_json(&text).unwrap(), net);
        assert!(
            NetworkParams::from_json(&text.replace("\"version\": 1", "\"version\": 2")).is_err()
        );
    }

    #[test]
    fn mask_validation() {
        let net = identity_net();
        assert!(sample_dropout_masks(&net, 0.0, 1).is_err());
        assert!(sample_dropout_masks(&net, 1.0, 1).is_err());
        let other = NetworkParams::init(&[3, 2], 0).unwrap();
        let masks = sample_dropout_masks(&other, 0.5, 1).unwrap();
        assert!(forward(&net, &[1.0, 2.0], ForwardMode::Stochastic(&masks)).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let net = NetworkParams::init(&[2, 4, 3], 5).unwrap();
        let flat = flatten_params(&net);
        assert_eq!(flat.len(), net.num_parameters());
        assert_eq!(unflatten_params(&net, &flat).unwrap(), net);
    }
}
