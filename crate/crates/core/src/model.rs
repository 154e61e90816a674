//! Multilayer perceptron classifier with hand-written backpropagation.
//!
//! Hidden layers use ReLU. The output of the last hidden layer is the
//! embedding `z` fed to the final linear layer `W` (one row per class); the
//! gradient embeddings used by the query strategies are built from `z` and
//! the softmax output.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{ensure_len, invalid, FalError, Result};
use crate::linalg::{argmax, axpy, dot};
use crate::rng::rng_from;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden.contains(&0) {
            return Err(invalid(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    /// `[input, hidden.., classes]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.num_classes);
        sizes
    }

    /// Width of the penultimate embedding `z`.
    pub fn embedding_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// Fully connected layer, weights stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn row(&self, out: usize) -> &[f64] {
        &self.weights[out * self.inputs..(out + 1) * self.inputs]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = self.bias[o] + dot(self.row(o), x);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub layers: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let sizes = arch.layer_sizes();
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    /// The final linear layer `W` (`C × d`).
    pub fn classifier(&self) -> &Dense {
        self.layers.last().expect("model has at least one layer")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(arch);
        ensure_len(params.num_params(), flat.len())?;
        let mut at = 0;
        for l in &mut params.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(params)
    }

    pub fn for_each_pair(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, &y)| f(x, y));
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, &y)| f(x, y));
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut a.weights, factor, &b.weights);
            axpy(&mut a.bias, factor, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Shape chain and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let sizes = self.arch.layer_sizes();
        ensure_len(sizes.len() - 1, self.layers.len())?;
        for (l, w) in self.layers.iter().zip(sizes.windows(2)) {
            if l.inputs != w[0] || l.outputs != w[1] {
                return Err(invalid("layer sizes disagree with architecture"));
            }
            ensure_len(w[0] * w[1], l.weights.len())?;
            ensure_len(w[1], l.bias.len())?;
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = rng_from(seed);
    let mut params = ModelParams::zeros(arch);
    for layer in &mut params.layers {
        let bound = 1.0 / (layer.inputs as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Prediction {
    pub fn pseudo_label(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Layer activations for one input: `acts[0]` is the input, `acts[i]` the
/// output of layer `i` (post-ReLU for hidden layers, raw logits for the last).
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    fn new(arch: &Architecture) -> Self {
        Self {
            acts: arch.layer_sizes().into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    fn run(&mut self, params: &ModelParams, x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let last = params.layers.len() - 1;
        for (i, layer) in params.layers.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(i + 1);
            let out = &mut after[0];
            layer.apply(&before[i], out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    fn embedding(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

fn check_input(params: &ModelParams, features: &[f64]) -> Result<()> {
    ensure_len(params.arch.input_dim, features.len())
}

pub fn forward(params: &ModelParams, features: &[f64]) -> Result<Prediction> {
    check_input(params, features)?;
    let mut trace = Trace::new(&params.arch);
    trace.run(params, features);
    let logits = trace.logits().to_vec();
    Ok(Prediction {
        probs: softmax(&logits),
        logits,
        embedding: trace.embedding().to_vec(),
    })
}

pub fn predict_all<'a>(
    params: &ModelParams,
    inputs: impl IntoIterator<Item = &'a [f64]>,
) -> Result<Vec<Prediction>> {
    inputs.into_iter().map(|x| forward(params, x)).collect()
}

/// Pseudo-label `ŷ = argmax p` and the negative cross-entropy gradient with
/// respect to the classifier row `W_ŷ`: `z · (1 − p_ŷ)`.
pub fn gradient_embedding(params: &ModelParams, features: &[f64]) -> Result<(usize, Vec<f64>)> {
    let pred = forward(params, features)?;
    Ok(pseudo_label_gradient(&pred))
}

pub fn pseudo_label_gradient(pred: &Prediction) -> (usize, Vec<f64>) {
    let y = pred.pseudo_label();
    let scale = 1.0 - pred.probs[y];
    (y, pred.embedding.iter().map(|z| z * scale).collect())
}

/// All `C` rows `z · (1[ŷ=c] − p_c)` concatenated.
pub fn full_gradient_embedding(params: &ModelParams, features: &[f64]) -> Result<Vec<f64>> {
    Ok(full_gradient(&forward(params, features)?))
}

pub fn full_gradient(pred: &Prediction) -> Vec<f64> {
    let y = pred.pseudo_label();
    let mut out = Vec::with_capacity(pred.probs.len() * pred.embedding.len());
    for (c, &p) in pred.probs.iter().enumerate() {
        let scale = if c == y { 1.0 - p } else { -p };
        out.extend(pred.embedding.iter().map(|z| z * scale));
    }
    out
}

fn sample_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Mean cross-entropy over `samples` and its gradient (same shape as the model).
/// Also returns the number of samples whose argmax matched the label.
pub fn loss_and_gradient(params: &ModelParams, samples: &[Sample<'_>]) -> Result<(f64, ModelParams, usize)> {
    if samples.is_empty() {
        return Err(invalid("gradient of an empty batch"));
    }
    let mut grads = ModelParams::zeros(&params.arch);
    let mut trace = Trace::new(&params.arch);
    let mut deltas: Vec<Vec<f64>> = params.arch.layer_sizes()[1..]
        .iter()
        .map(|&n| vec![0.0; n])
        .collect();
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    for s in samples {
        check_input(params, s.features)?;
        if s.label >= params.arch.num_classes {
            return Err(invalid(format!("label {} out of range", s.label)));
        }
        accumulate(params, &mut trace, &mut deltas, &mut grads, s, scale, &mut loss, &mut correct);
    }
    Ok((loss * scale, grads, correct))
}

#[allow(clippy::too_many_arguments)]
fn accumulate(
    params: &ModelParams,
    trace: &mut Trace,
    deltas: &mut [Vec<f64>],
    grads: &mut ModelParams,
    s: &Sample<'_>,
    scale: f64,
    loss: &mut f64,
    correct: &mut usize,
) {
    trace.run(params, s.features);
    let probs = softmax(trace.logits());
    *loss += sample_loss(&probs, s.label);
    if argmax(&probs) == s.label {
        *correct += 1;
    }
    let last = params.layers.len() - 1;
    {
        let d = &mut deltas[last];
        for (c, slot) in d.iter_mut().enumerate() {
            let target = if c == s.label { 1.0 } else { 0.0 };
            *slot = scale * (probs[c] - target);
        }
    }
    for i in (0..=last).rev() {
        let input = &trace.acts[i];
        let g = &mut grads.layers[i];
        let d = &deltas[i];
        for (o, &dv) in d.iter().enumerate() {
            if dv != 0.0 {
                axpy(&mut g.weights[o * g.inputs..(o + 1) * g.inputs], dv, input);
                g.bias[o] += dv;
            }
        }
        if i > 0 {
            let (lower, upper) = deltas.split_at_mut(i);
            let prev = &mut lower[i - 1];
            prev.iter_mut().for_each(|v| *v = 0.0);
            let layer = &params.layers[i];
            for (o, &dv) in upper[0].iter().enumerate() {
                if dv != 0.0 {
                    axpy(prev, dv, layer.row(o));
                }
            }
            // ReLU derivative
            for (p, &a) in prev.iter_mut().zip(&trace.acts[i]) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
    }
}

/// Mean cross-entropy loss without gradients.
pub fn mean_loss(params: &ModelParams, samples: &[Sample<'_>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("loss of an empty set"));
    }
    let mut total = 0.0;
    for s in samples {
        let p = forward(params, s.features)?;
        total += sample_loss(&p.probs, s.label);
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(params: &ModelParams, samples: &[Sample<'_>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate on an empty set"));
    }
    check_input(params, samples[0].features)?;
    let mut trace = Trace::new(&params.arch);
    let mut correct = 0usize;
    for s in samples {
        check_input(params, s.features)?;
        trace.run(params, s.features);
        if argmax(trace.logits()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// `0` means full batch.
    pub batch_size: usize,
    /// Multiplicative decay applied at 1/2 and 3/4 of the epochs; `None` keeps
    /// the rate constant.
    pub lr_decay: Option<f64>,
    pub early_stop_train_acc: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 5,
            batch_size: 32,
            lr_decay: Some(0.1),
            early_stop_train_acc: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(invalid("lr_decay must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Step-decay factor at position `step` of `total` (milestones at 1/2 and 3/4).
pub fn decay_factor(decay: Option<f64>, step: usize, total: usize) -> f64 {
    let Some(d) = decay else { return 1.0 };
    [total / 2, 3 * total / 4]
        .iter()
        .filter(|&&m| m > 0 && step >= m)
        .fold(1.0, |acc, _| acc * d)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs_run: usize,
    /// Running mean loss over the last epoch (pre-update predictions).
    pub train_loss: f64,
    /// Running accuracy over the last epoch.
    pub train_acc: f64,
}

/// Mini-batch SGD with heavy-ball momentum (`v ← μv + g`, `θ ← θ − ηv`) on
/// mean cross-entropy. Data order is reshuffled every epoch from `config.seed`.
pub fn sgd_train(params: &ModelParams, samples: &[Sample<'_>], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(invalid("cannot train on an empty labeled set"));
    }
    for s in samples {
        check_input(params, s.features)?;
        if s.label >= params.arch.num_classes {
            return Err(invalid(format!("label {} out of range", s.label)));
        }
    }
    let mut rng = rng_from(config.seed);
    let mut theta = params.clone();
    let mut velocity = ModelParams::zeros(&params.arch);
    let mut grads = ModelParams::zeros(&params.arch);
    let mut trace = Trace::new(&params.arch);
    let mut deltas: Vec<Vec<f64>> = params.arch.layer_sizes()[1..]
        .iter()
        .map(|&n| vec![0.0; n])
        .collect();
    let batch = if config.batch_size == 0 {
        samples.len()
    } else {
        config.batch_size.min(samples.len())
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut outcome_loss = 0.0;
    let mut outcome_acc = 0.0;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        let lr = config.learning_rate * decay_factor(config.lr_decay, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for chunk in order.chunks(batch) {
            grads.scale(0.0);
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut correct = 0;
            for &i in chunk {
                accumulate(&theta, &mut trace, &mut deltas, &mut grads, &samples[i], scale, &mut loss, &mut correct);
            }
            epoch_loss += loss;
            epoch_correct += correct;
            if config.momentum > 0.0 {
                velocity.scale(config.momentum);
                velocity.add_scaled(&grads, 1.0);
                theta.add_scaled(&velocity, -lr);
            } else {
                theta.add_scaled(&grads, -lr);
            }
        }
        epochs_run = epoch + 1;
        outcome_loss = epoch_loss / samples.len() as f64;
        outcome_acc = epoch_correct as f64 / samples.len() as f64;
        if let Some(threshold) = config.early_stop_train_acc {
            let acc = evaluate(&theta, samples)?;
            if acc >= threshold {
                outcome_acc = acc;
                break;
            }
        }
    }
    if !theta.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite())) {
        return Err(FalError::InvalidArgument("training diverged to non-finite parameters".into()));
    }
    Ok(TrainOutcome {
        params: theta,
        epochs_run,
        train_loss: outcome_loss,
        train_acc: outcome_acc,
    })
}
