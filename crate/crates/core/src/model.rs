//! A small feedforward classifier engine.
//!
//! [`MlpModel`] is a stack of dense layers followed by a softmax, with exact
//! reverse-mode gradients of any class probability with respect to the input
//! and minibatch SGD training. [`LinearSoftmaxModel`], [`LinearProbabilityHead`]
//! and [`ConstantModel`] are closed-form models whose behaviour can be worked
//! out by hand; tests use them as oracles.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attribution::Instance;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Anything that maps an input vector to per-class scores.
///
/// For softmax models the scores are probabilities; the linear probability
/// head returns raw affine scores.
pub trait Classifier: Send + Sync {
    fn input_dim(&self) -> usize;

    fn class_count(&self) -> usize;

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// d f_y / d x.
    fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>>;

    fn class_probability(&self, x: &[f64], class: usize) -> Result<f64> {
        check_class(class, self.class_count())?;
        Ok(self.predict_proba(x)?[class])
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    /// Downcast hook for explainers that need the closed form.
    fn as_linear(&self) -> Option<&LinearSoftmaxModel> {
        None
    }
}

fn check_input(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::shape(dim, x.len(), "model input"));
    }
    Ok(())
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(Error::ClassOutOfRange { class, classes });
    }
    Ok(())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Given p = softmax(z), returns d p_class / d z.
fn softmax_component_grad(p: &[f64], class: usize) -> Vec<f64> {
    let py = p[class];
    p.iter()
        .enumerate()
        .map(|(k, &pk)| if k == class { py * (1.0 - pk) } else { -py * pk })
        .collect()
}

/// Fraction of labelled instances the classifier gets right.
pub fn accuracy(model: &dyn Classifier, data: &[Instance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for inst in data {
        if Some(model.predict(&inst.features)?) == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Dense layer with row-major `out × in` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
    pub(crate) activation: Activation,
}

impl DenseLayer {
    pub fn new(
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let out_dim = weights.len();
        if out_dim == 0 {
            return Err(Error::InvalidModel("layer has no output units".into()));
        }
        let in_dim = weights[0].len();
        if in_dim == 0 || weights.iter().any(|row| row.len() != in_dim) {
            return Err(Error::InvalidModel("weight matrix rows are ragged or empty".into()));
        }
        if biases.len() != out_dim {
            return Err(Error::shape(out_dim, biases.len(), "layer biases"));
        }
        let weights: Vec<f64> = weights.into_iter().flatten().collect();
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        Ok(Self {
            weights,
            biases,
            in_dim,
            out_dim,
            activation,
        })
    }

    fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weights = (0..in_dim * out_dim).map(|_| draw()).collect();
        let biases = (0..out_dim).map(|_| draw()).collect();
        Self {
            weights,
            biases,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self, out: usize, input: usize) -> f64 {
        self.weights[out * self.in_dim + input]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub(crate) fn weight_std(&self) -> f64 {
        let n = self.weights.len() as f64;
        let mean = self.weights.iter().sum::<f64>() / n;
        (self.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (o, row) in self.weights.chunks_exact(self.in_dim).enumerate() {
            let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            out.push(dot + self.biases[o]);
        }
    }

    fn activate(&self, z: &[f64]) -> Vec<f64> {
        match self.activation {
            Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Identity => z.to_vec(),
        }
    }

    /// Given dL/d(output activation) and the pre-activation, returns
    /// dL/d(pre-activation).
    fn activation_backward(&self, grad: &mut [f64], z: &[f64]) {
        if self.activation == Activation::Relu {
            for (g, &zi) in grad.iter_mut().zip(z) {
                if zi <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }

    /// W^T g
    fn backward_input(&self, grad_z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (row, &g) in self.weights.chunks_exact(self.in_dim).zip(grad_z) {
            if g != 0.0 {
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += w * g;
                }
            }
        }
        out
    }
}

/// Layered feedforward classifier; the last layer's output goes through a
/// softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    init_seed: u64,
}

/// Per-layer pre-activations and activations of one forward pass.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl MlpModel {
    /// ReLU hidden layers of the given widths and an identity output layer,
    /// initialized uniformly in ±1/√fan_in.
    pub fn new(input_dim: usize, hidden: &[usize], class_count: usize, init_seed: u64) -> Result<Self> {
        if input_dim == 0 || class_count == 0 || hidden.contains(&0) {
            return Err(Error::InvalidModel("all layer widths must be positive".into()));
        }
        let mut rng = seed::rng(init_seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(class_count);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                DenseLayer::init(w[0], w[1], act, &mut rng)
            })
            .collect();
        Ok(Self { layers, init_seed })
    }

    /// All parameters zero: the output is uniform for every input.
    pub fn zeros(input_dim: usize, hidden: &[usize], class_count: usize) -> Result<Self> {
        let mut m = Self::new(input_dim, hidden, class_count, 0)?;
        for layer in &mut m.layers {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        Ok(m)
    }

    pub fn from_layers(layers: Vec<DenseLayer>, init_seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::InvalidModel(format!(
                    "layer output width {} does not match next layer input width {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers, init_seed })
    }

    /// Same architecture, fresh parameters drawn from the init distribution.
    pub fn reinitialized(&self, init_seed: u64) -> Self {
        let mut rng = seed::rng(init_seed);
        let layers = self
            .layers
            .iter()
            .map(|l| DenseLayer::init(l.in_dim, l.out_dim, l.activation, &mut rng))
            .collect();
        Self { layers, init_seed }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            layer.affine(&a, &mut z);
            let next = layer.activate(&z);
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z.clone());
        }
        softmax_in_place(&mut a);
        Trace {
            inputs,
            pre,
            probs: a,
        }
    }

    /// Backpropagates dL/d(logits) through every layer. Calls `on_layer` with
    /// (layer index, dL/d(pre-activation), layer input) from last to first and
    /// returns dL/d(input).
    fn backward(
        &self,
        trace: &Trace,
        grad_logits: Vec<f64>,
        mut on_layer: impl FnMut(usize, &[f64], &[f64]),
    ) -> Vec<f64> {
        let mut grad = grad_logits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation_backward(&mut grad, &trace.pre[i]);
            on_layer(i, &grad, &trace.inputs[i]);
            grad = layer.backward_input(&grad);
        }
        grad
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            input_dim: self.input_dim(),
            class_count: self.class_count(),
            init_seed: Some(self.init_seed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.chunks_exact(l.in_dim).map(<[f64]>::to_vec).collect(),
                    biases: l.biases.clone(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn from_weight_file(file: WeightFile) -> Result<Self> {
        let layers = file
            .layers
            .into_iter()
            .map(|l| DenseLayer::new(l.weights, l.biases, l.activation))
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_layers(layers, file.init_seed.unwrap_or(0))?;
        if model.input_dim() != file.input_dim {
            return Err(Error::shape(file.input_dim, model.input_dim(), "weight file input_dim"));
        }
        if model.class_count() != file.class_count {
            return Err(Error::shape(file.class_count, model.class_count(), "weight file class_count"));
        }
        Ok(model)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.to_weight_file())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_weight_file(serde_json::from_str(&text)?)
    }
}

impl Classifier for MlpModel {
    fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.input_dim())?;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            layer.affine(&a, &mut z);
            a = layer.activate(&z);
        }
        softmax_in_place(&mut a);
        Ok(a)
    }

    fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        check_input(x, self.input_dim())?;
        check_class(class, self.class_count())?;
        let trace = self.trace(x);
        let grad_logits = softmax_component_grad(&trace.probs, class);
        Ok(self.backward(&trace, grad_logits, |_, _, _| {}))
    }
}

/// JSON weight file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFile {
    pub input_dim: usize,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// softmax(W x + b) with `W` of shape `C × D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl LinearSoftmaxModel {
    pub fn new(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self> {
        validate_affine(&weights, &biases)?;
        Ok(Self { weights, biases })
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        affine_rows(&self.weights, &self.biases, x)
    }
}

impl Classifier for LinearSoftmaxModel {
    fn input_dim(&self) -> usize {
        self.weights[0].len()
    }

    fn class_count(&self) -> usize {
        self.weights.len()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.input_dim())?;
        let mut z = self.logits(x);
        softmax_in_place(&mut z);
        Ok(z)
    }

    fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        check_class(class, self.class_count())?;
        let p = self.predict_proba(x)?;
        let dz = softmax_component_grad(&p, class);
        let mut g = vec![0.0; self.input_dim()];
        for (row, &d) in self.weights.iter().zip(&dz) {
            for (gi, &w) in g.iter_mut().zip(row) {
                *gi += d * w;
            }
        }
        Ok(g)
    }

    fn as_linear(&self) -> Option<&LinearSoftmaxModel> {
        Some(self)
    }
}

/// Affine scores `W x + b` used directly as class "probabilities", without a
/// softmax. Makes perturbation-based metrics exactly computable by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbabilityHead {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl LinearProbabilityHead {
    pub fn new(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self> {
        validate_affine(&weights, &biases)?;
        Ok(Self { weights, biases })
    }

    /// A single-class head `f_0(x) = w · x`.
    pub fn single(weights: Vec<f64>) -> Result<Self> {
        Self::new(vec![weights], vec![0.0])
    }
}

impl Classifier for LinearProbabilityHead {
    fn input_dim(&self) -> usize {
        self.weights[0].len()
    }

    fn class_count(&self) -> usize {
        self.weights.len()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.input_dim())?;
        Ok(affine_rows(&self.weights, &self.biases, x))
    }

    fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        check_input(x, self.input_dim())?;
        check_class(class, self.class_count())?;
        Ok(self.weights[class].clone())
    }
}

/// Returns the same output for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    input_dim: usize,
    output: Vec<f64>,
}

impl ConstantModel {
    pub fn new(input_dim: usize, output: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output.is_empty() {
            return Err(Error::InvalidModel("constant model needs inputs and outputs".into()));
        }
        Ok(Self { input_dim, output })
    }
}

impl Classifier for ConstantModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn class_count(&self) -> usize {
        self.output.len()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.input_dim)?;
        Ok(self.output.clone())
    }

    fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        check_input(x, self.input_dim)?;
        check_class(class, self.class_count())?;
        Ok(vec![0.0; self.input_dim])
    }
}

fn validate_affine(weights: &[Vec<f64>], biases: &[f64]) -> Result<()> {
    let d = weights.first().map_or(0, Vec::len);
    if d == 0 || weights.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidModel("weight matrix must be non-empty and rectangular".into()));
    }
    if biases.len() != weights.len() {
        return Err(Error::shape(weights.len(), biases.len(), "biases"));
    }
    if weights.iter().flatten().chain(biases).any(|v| !v.is_finite()) {
        return Err(Error::InvalidModel("non-finite parameter".into()));
    }
    Ok(())
}

fn affine_rows(weights: &[Vec<f64>], biases: &[f64], x: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .zip(biases)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect()
}

/// How training inputs are masked for out-of-distribution robustness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAugment {
    None,
    Zeros,
    /// Replace masked features with these per-feature values.
    Mean(Vec<f64>),
}

/// Stop once holdout accuracy reaches `fraction × target_accuracy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub fraction: f64,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
    pub mask_augment: MaskAugment,
    #[serde(default)]
    pub mask_probability: f64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.0,
            seed: 0,
            mask_augment: MaskAugment::None,
            mask_probability: 0.0,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidTrainConfig(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return bad("mask_probability must be in [0, 1]");
        }
        if let MaskAugment::Mean(m) = &self.mask_augment {
            if m.len() != input_dim {
                return Err(Error::shape(input_dim, m.len(), "mask_augment mean vector"));
            }
        }
        if let Some(es) = self.early_stop {
            if !(es.fraction > 0.0 && es.fraction <= 1.0) {
                return bad("early_stop.fraction must be in (0, 1]");
            }
            if !(es.target_accuracy > 0.0 && es.target_accuracy <= 1.0) {
                return bad("early_stop.target_accuracy must be in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: usize,
    pub train_accuracy: f64,
    /// Accuracy on the holdout set, or on the training set when no holdout
    /// was supplied.
    pub holdout_accuracy: f64,
    pub final_loss: f64,
    pub stopped_early: bool,
}

/// Minibatch SGD on cross-entropy, starting from `init`.
///
/// Single-threaded and bitwise reproducible for a given (`init`, data, `cfg`).
/// With `epochs == 0` the returned model equals `init`.
pub fn train(
    init: &MlpModel,
    train_set: &[Instance],
    holdout: &[Instance],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = init.input_dim();
    let classes = init.class_count();
    cfg.validate(dim)?;
    for inst in train_set.iter().chain(holdout) {
        check_input(&inst.features, dim)?;
        match inst.label {
            Some(l) => check_class(l, classes)?,
            None => return Err(Error::InvalidTrainConfig("training data must be labelled".into())),
        }
    }
    let eval_set = if holdout.is_empty() { train_set } else { holdout };
    let stop_at = cfg.early_stop.map(|es| es.fraction * es.target_accuracy);

    let mut model = init.clone();
    let mut rng = seed::rng(cfg.seed);
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = 0usize;
    let mut epochs_run = 0usize;
    let mut final_loss = f64::NAN;
    let mut stopped_early = false;

    if let Some(threshold) = stop_at {
        if cfg.epochs > 0 && accuracy(&model, eval_set)? >= threshold {
            stopped_early = true;
        }
    }

    'epochs: for _ in 0..cfg.epochs {
        if stopped_early {
            break;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<(Vec<f64>, Vec<f64>)> = velocity
                .iter()
                .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let inst = &train_set[idx];
                let x = augment(&inst.features, cfg, &mut rng);
                let label = inst.label.unwrap_or_default();
                let trace = model.trace(&x);
                batch_loss -= trace.probs[label].max(f64::MIN_POSITIVE).ln();
                let mut grad_logits = trace.probs.clone();
                grad_logits[label] -= 1.0;
                model.backward(&trace, grad_logits, |i, grad_z, input| {
                    let (gw, gb) = &mut grads[i];
                    let in_dim = input.len();
                    for (o, &g) in grad_z.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        gb[o] += g;
                        for (w, &a) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(input) {
                            *w += g * a;
                        }
                    }
                });
            }
            if !batch_loss.is_finite() {
                return Err(Error::DivergedTraining { step: steps });
            }
            epoch_loss += batch_loss;
            let scale = cfg.learning_rate / batch.len() as f64;
            for ((layer, (vw, vb)), (gw, gb)) in
                model.layers.iter_mut().zip(&mut velocity).zip(&grads)
            {
                sgd_update(&mut layer.weights, vw, gw, scale, cfg.momentum);
                sgd_update(&mut layer.biases, vb, gb, scale, cfg.momentum);
            }
            if model
                .layers
                .iter()
                .any(|l| l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()))
            {
                return Err(Error::DivergedTraining { step: steps });
            }
            steps += 1;
            if let Some(threshold) = stop_at {
                if accuracy(&model, eval_set)? >= threshold {
                    stopped_early = true;
                    epochs_run += 1;
                    final_loss = epoch_loss / train_set.len() as f64;
                    break 'epochs;
                }
            }
        }
        epochs_run += 1;
        final_loss = epoch_loss / train_set.len() as f64;
    }

    let report = TrainReport {
        epochs_run,
        steps,
        train_accuracy: accuracy(&model, train_set)?,
        holdout_accuracy: accuracy(&model, eval_set)?,
        final_loss,
        stopped_early,
    };
    Ok((model, report))
}

fn sgd_update(params: &mut [f64], velocity: &mut [f64], grad: &[f64], scale: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity).zip(grad) {
        *v = momentum * *v + scale * g;
        *p -= *v;
    }
}

/// With probability `mask_probability`, replaces a uniformly random number
/// k ∈ {0..D} of uniformly chosen features by the masking baseline.
fn augment(x: &[f64], cfg: &TrainConfig, rng: &mut Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    if matches!(cfg.mask_augment, MaskAugment::None) || cfg.mask_probability == 0.0 {
        return out;
    }
    if !rng.random_bool(cfg.mask_probability) {
        return out;
    }
    let d = x.len();
    let k = rng.random_range(0..=d);
    let mut features: Vec<usize> = (0..d).collect();
    features.shuffle(rng);
    for &i in &features[..k] {
        out[i] = match &cfg.mask_augment {
            MaskAugment::Mean(m) => m[i],
            _ => 0.0,
        };
    }
    out
}
