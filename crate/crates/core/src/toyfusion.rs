//! Small late-fusion classifier with hand-written backpropagation.
//!
//! Frame features go through a two-layer tanh projector into the hidden
//! space, are joined with the text token features, mean-pooled and passed
//! through one dense aggregation layer to give `H`. Audio frames are
//! average-pooled into `H_a` (the zero vector when there is no audio). The
//! classifier is a linear map on the concatenation `[H; H_a]` followed by
//! a softmax.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{Classifier, ClassifierError};
use crate::types::{ModelOutput, ProbError, ProbVector, VideoItem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no frame features")]
    NoFrames,
    #[error("no audio frames")]
    EmptyAudio,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("loss diverged at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("invalid output distribution: {0}")]
    Output(#[from] ProbError),
    #[error("parameter file: {0}")]
    Params(String),
}

/// Per-item inputs: frame features, text token features and audio frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub frame_feats: Vec<Vec<f64>>,
    #[serde(default)]
    pub text_feats: Vec<Vec<f64>>,
    #[serde(default)]
    pub audio_frames: Vec<Vec<f64>>,
}

/// A bundle with its class label; one JSONL line of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBundle {
    #[serde(flatten)]
    pub bundle: FeatureBundle,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub frame_dim: usize,
    pub hidden_dim: usize,
    pub audio_dim: usize,
    pub num_classes: usize,
}

/// Dense layer `y = W x + b`, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: vec![vec![0.0; inputs]; outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..outputs)
            .map(|_| (0..inputs).map(|_| rng.random_range(-bound..=bound)).collect())
            .collect();
        Dense {
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.first().map_or(0, Vec::len)
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// `W^T g`
    fn backprop_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs()];
        for (row, gi) in self.weight.iter().zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }

    /// Adds `g x^T` to the weight gradient and `g` to the bias gradient.
    fn accumulate(&mut self, g: &[f64], x: &[f64]) {
        for ((row, b), gi) in self.weight.iter_mut().zip(self.bias.iter_mut()).zip(g) {
            for (w, xj) in row.iter_mut().zip(x) {
                *w += gi * xj;
            }
            *b += gi;
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().flatten().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().flatten().chain(self.bias.iter_mut())
    }

    fn check(&self, what: &'static str, inputs: usize, outputs: usize) -> Result<(), FusionError> {
        check_dim(what, outputs, self.weight.len())?;
        check_dim(what, outputs, self.bias.len())?;
        for row in &self.weight {
            check_dim(what, inputs, row.len())?;
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(what));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), FusionError> {
    if expected == got {
        Ok(())
    } else {
        Err(FusionError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// All trainable parameters. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// First projector layer, `frame_dim -> hidden_dim`, followed by tanh.
    pub projector_in: Dense,
    /// Second projector layer, `hidden_dim -> hidden_dim`.
    pub projector_out: Dense,
    /// Applied to the mean-pooled token sequence, `hidden_dim -> hidden_dim`.
    pub aggregator: Dense,
    /// `hidden_dim + audio_dim -> num_classes`.
    pub classifier: Dense,
}

impl FusionParams {
    pub fn zeros(dims: FusionDims) -> Self {
        FusionParams {
            projector_in: Dense::zeros(dims.frame_dim, dims.hidden_dim),
            projector_out: Dense::zeros(dims.hidden_dim, dims.hidden_dim),
            aggregator: Dense::zeros(dims.hidden_dim, dims.hidden_dim),
            classifier: Dense::zeros(dims.hidden_dim + dims.audio_dim, dims.num_classes),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: FusionDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusionParams {
            projector_in: Dense::init(dims.frame_dim, dims.hidden_dim, &mut rng),
            projector_out: Dense::init(dims.hidden_dim, dims.hidden_dim, &mut rng),
            aggregator: Dense::init(dims.hidden_dim, dims.hidden_dim, &mut rng),
            classifier: Dense::init(dims.hidden_dim + dims.audio_dim, dims.num_classes, &mut rng),
        }
    }

    pub fn dims(&self) -> FusionDims {
        let hidden_dim = self.projector_in.outputs();
        FusionDims {
            frame_dim: self.projector_in.inputs(),
            hidden_dim,
            audio_dim: self.classifier.inputs().saturating_sub(hidden_dim),
            num_classes: self.classifier.outputs(),
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let d = self.dims();
        if d.num_classes < 2 {
            return Err(FusionError::DimensionMismatch {
                what: "classifier outputs",
                expected: 2,
                got: d.num_classes,
            });
        }
        self.projector_in.check("projector_in", d.frame_dim, d.hidden_dim)?;
        self.projector_out.check("projector_out", d.hidden_dim, d.hidden_dim)?;
        self.aggregator.check("aggregator", d.hidden_dim, d.hidden_dim)?;
        self.classifier
            .check("classifier", d.hidden_dim + d.audio_dim, d.num_classes)
    }

    fn layers(&self) -> [&Dense; 4] {
        [
            &self.projector_in,
            &self.projector_out,
            &self.aggregator,
            &self.classifier,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 4] {
        [
            &mut self.projector_in,
            &mut self.projector_out,
            &mut self.aggregator,
            &mut self.classifier,
        ]
    }

    /// Every parameter in a fixed order: layers in declaration order, each
    /// weight matrix row-major then its bias.
    pub fn values(&self) -> Vec<f64> {
        self.layers()
            .into_iter()
            .flat_map(|l| l.values().copied())
            .collect()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().into_iter().flat_map(Dense::values_mut)
    }

    pub fn num_values(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.outputs() * (l.inputs() + 1))
            .sum()
    }

    fn zeros_like(&self) -> Self {
        FusionParams::zeros(self.dims())
    }

    /// `self += scale * other`
    fn add_scaled(&mut self, other: &FusionParams, scale: f64) {
        let others = other.values();
        for (v, o) in self.values_mut().zip(others) {
            *v += scale * o;
        }
    }

    /// Flat JSON object of named arrays plus the four dimensions.
    pub fn to_json(&self) -> serde_json::Value {
        let d = self.dims();
        let mut map = serde_json::Map::new();
        map.insert("frame_dim".into(), d.frame_dim.into());
        map.insert("hidden_dim".into(), d.hidden_dim.into());
        map.insert("audio_dim".into(), d.audio_dim.into());
        map.insert("num_classes".into(), d.num_classes.into());
        for (name, layer) in LAYER_NAMES.iter().zip(self.layers()) {
            let w: Vec<f64> = layer.weight.iter().flatten().copied().collect();
            map.insert(format!("{name}.weight"), w.into());
            map.insert(format!("{name}.bias"), layer.bias.clone().into());
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, FusionError> {
        #[derive(Deserialize)]
        struct Flat {
            frame_dim: usize,
            hidden_dim: usize,
            audio_dim: usize,
            num_classes: usize,
            #[serde(flatten)]
            arrays: BTreeMap<String, Vec<f64>>,
        }
        let flat: Flat =
            serde_json::from_value(value.clone()).map_err(|e| FusionError::Params(e.to_string()))?;
        let dims = FusionDims {
            frame_dim: flat.frame_dim,
            hidden_dim: flat.hidden_dim,
            audio_dim: flat.audio_dim,
            num_classes: flat.num_classes,
        };
        let mut params = FusionParams::zeros(dims);
        for (name, layer) in LAYER_NAMES.iter().zip(params.layers_mut()) {
            let take = |key: String| {
                flat.arrays
                    .get(&key)
                    .ok_or_else(|| FusionError::Params(format!("missing array `{key}`")))
            };
            let w = take(format!("{name}.weight"))?;
            let b = take(format!("{name}.bias"))?;
            let (rows, cols) = (layer.outputs(), layer.inputs());
            check_dim("weight array", rows * cols, w.len())?;
            check_dim("bias array", rows, b.len())?;
            layer.weight = w.chunks(cols.max(1)).map(<[f64]>::to_vec).collect();
            if cols == 0 {
                layer.weight = vec![Vec::new(); rows];
            }
            layer.bias = b.clone();
        }
        params.validate()?;
        Ok(params)
    }
}

const LAYER_NAMES: [&str; 4] = ["projector_in", "projector_out", "aggregator", "classifier"];

fn check_bundle(dims: FusionDims, bundle: &FeatureBundle) -> Result<(), FusionError> {
    if bundle.frame_feats.is_empty() {
        return Err(FusionError::NoFrames);
    }
    let groups: [(&'static str, &Vec<Vec<f64>>, usize); 3] = [
        ("frame_feats", &bundle.frame_feats, dims.frame_dim),
        ("text_feats", &bundle.text_feats, dims.hidden_dim),
        ("audio_frames", &bundle.audio_frames, dims.audio_dim),
    ];
    for (what, vectors, dim) in groups {
        for v in vectors {
            check_dim(what, dim, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(FusionError::NonFinite(what));
            }
        }
    }
    Ok(())
}

fn project_one(params: &FusionParams, frame: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hidden: Vec<f64> = params
        .projector_in
        .apply(frame)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let out = params.projector_out.apply(&hidden);
    (hidden, out)
}

/// Projects each frame feature vector into the hidden space
/// (dense, tanh, dense).
pub fn project(params: &FusionParams, frame_feats: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, FusionError> {
    if frame_feats.is_empty() {
        return Err(FusionError::NoFrames);
    }
    let dim = params.projector_in.inputs();
    frame_feats
        .iter()
        .map(|f| {
            check_dim("frame_feats", dim, f.len())?;
            Ok(project_one(params, f).1)
        })
        .collect()
}

/// Elementwise mean over audio frames.
pub fn audio_pool(audio_frames: &[Vec<f64>]) -> Result<Vec<f64>, FusionError> {
    let first = audio_frames.first().ok_or(FusionError::EmptyAudio)?;
    let mut sum = vec![0.0; first.len()];
    for frame in audio_frames {
        check_dim("audio_frames", first.len(), frame.len())?;
        for (s, x) in sum.iter_mut().zip(frame) {
            *s += x;
        }
    }
    let n = audio_frames.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

// Intermediate values kept for the backward pass.
struct Trace {
    frames_hidden: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    fused: Vec<f64>,
    probs: Vec<f64>,
    tokens: usize,
}

fn forward_trace(params: &FusionParams, bundle: &FeatureBundle) -> Result<Trace, FusionError> {
    let dims = params.dims();
    check_bundle(dims, bundle)?;
    let mut sum = vec![0.0; dims.hidden_dim];
    let mut frames_hidden = Vec::with_capacity(bundle.frame_feats.len());
    for frame in &bundle.frame_feats {
        let (hidden, out) = project_one(params, frame);
        for (s, x) in sum.iter_mut().zip(&out) {
            *s += x;
        }
        frames_hidden.push(hidden);
    }
    for token in &bundle.text_feats {
        for (s, x) in sum.iter_mut().zip(token) {
            *s += x;
        }
    }
    let tokens = bundle.frame_feats.len() + bundle.text_feats.len();
    let pooled: Vec<f64> = sum.into_iter().map(|s| s / tokens as f64).collect();
    let h = params.aggregator.apply(&pooled);
    let audio = if bundle.audio_frames.is_empty() {
        vec![0.0; dims.audio_dim]
    } else {
        audio_pool(&bundle.audio_frames)?
    };
    let fused: Vec<f64> = h.into_iter().chain(audio).collect();
    let probs = softmax(&params.classifier.apply(&fused));
    Ok(Trace {
        frames_hidden,
        pooled,
        fused,
        probs,
        tokens,
    })
}

/// Class distribution for one bundle.
pub fn forward(params: &FusionParams, bundle: &FeatureBundle) -> Result<ProbVector, FusionError> {
    let trace = forward_trace(params, bundle)?;
    Ok(ProbVector::new(trace.probs)?)
}

/// Cross-entropy `-ln p[label]` and its gradient with respect to every
/// parameter.
pub fn loss_and_grad(
    params: &FusionParams,
    bundle: &FeatureBundle,
    label: usize,
) -> Result<(f64, FusionParams), FusionError> {
    let dims = params.dims();
    if label >= dims.num_classes {
        return Err(FusionError::LabelOutOfRange {
            label,
            classes: dims.num_classes,
        });
    }
    let trace = forward_trace(params, bundle)?;
    let loss = -trace.probs[label].ln();

    let mut grads = params.zeros_like();
    let mut d_logits = trace.probs.clone();
    d_logits[label] -= 1.0;
    grads.classifier.accumulate(&d_logits, &trace.fused);
    let d_fused = params.classifier.backprop_input(&d_logits);
    let d_h = &d_fused[..dims.hidden_dim];
    grads.aggregator.accumulate(d_h, &trace.pooled);
    let d_pooled = params.aggregator.backprop_input(d_h);
    let d_token: Vec<f64> = d_pooled.iter().map(|g| g / trace.tokens as f64).collect();
    let d_hidden_pre = params.projector_out.backprop_input(&d_token);
    for (frame, hidden) in bundle.frame_feats.iter().zip(&trace.frames_hidden) {
        grads.projector_out.accumulate(&d_token, hidden);
        let d_act: Vec<f64> = d_hidden_pre
            .iter()
            .zip(hidden)
            .map(|(g, u)| g * (1.0 - u * u))
            .collect();
        grads.projector_in.accumulate(&d_act, frame);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: FusionDims,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: FusionParams,
    /// Mean loss over the dataset at the start of each epoch's update.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Full-batch gradient descent on mean cross-entropy.
pub fn train(dataset: &[LabeledBundle], config: TrainConfig) -> Result<TrainOutcome, FusionError> {
    if dataset.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(FusionError::InvalidLearningRate(config.learning_rate));
    }
    let mut params = FusionParams::init(config.dims, config.seed);
    params.validate()?;
    for ex in dataset {
        check_bundle(config.dims, &ex.bundle)?;
        if ex.label >= config.dims.num_classes {
            return Err(FusionError::LabelOutOfRange {
                label: ex.label,
                classes: config.dims.num_classes,
            });
        }
    }
    let n = dataset.len() as f64;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for ex in dataset {
            let (l, g) = loss_and_grad(&params, &ex.bundle, ex.label)?;
            loss += l;
            total.add_scaled(&g, 1.0);
        }
        let mean = loss / n;
        if !mean.is_finite() {
            return Err(FusionError::DivergenceDetected { epoch });
        }
        epoch_losses.push(mean);
        params.add_scaled(&total, -config.learning_rate / n);
        if params.values_mut().any(|v| !v.is_finite()) {
            return Err(FusionError::DivergenceDetected { epoch });
        }
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

/// Mean cross-entropy of `params` over a dataset.
pub fn mean_loss(params: &FusionParams, dataset: &[LabeledBundle]) -> Result<f64, FusionError> {
    if dataset.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in dataset {
        total += loss_and_grad(params, &ex.bundle, ex.label)?.0;
    }
    Ok(total / dataset.len() as f64)
}

/// Serves a trained fusion model as a cascade stage. Items must carry
/// features.
#[derive(Debug, Clone)]
pub struct FusionClassifier {
    model_id: String,
    cost_units: f64,
    params: FusionParams,
}

impl FusionClassifier {
    pub fn new(model_id: impl Into<String>, cost_units: f64, params: FusionParams) -> Result<Self, FusionError> {
        params.validate()?;
        Ok(FusionClassifier {
            model_id: model_id.into(),
            cost_units,
            params,
        })
    }

    pub fn params(&self) -> &FusionParams {
        &self.params
    }
}

impl Classifier for FusionClassifier {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn cost_units(&self) -> f64 {
        self.cost_units
    }

    fn score(&self, item: &VideoItem) -> Result<ModelOutput, ClassifierError> {
        let err = |m: String| ClassifierError::new(&self.model_id, m);
        let bundle = item
            .features
            .as_ref()
            .ok_or_else(|| err(format!("item `{}` has no features", item.id)))?;
        let probs = forward(&self.params, bundle).map_err(|e| err(e.to_string()))?;
        ModelOutput::new(probs, &self.model_id, self.cost_units).map_err(|e| err(e.to_string()))
    }
}

/// Generates a linearly separable two-class set: the class decides the sign
/// of a shared offset added to every feature.
pub fn separable_dataset(n: usize, dims: FusionDims, seed: u64) -> Vec<LabeledBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let vec_of = |dim: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..dim).map(|_| sign + rng.random_range(-0.5..0.5)).collect()
            };
            let frames = rng.random_range(1..=3);
            let bundle = FeatureBundle {
                frame_feats: (0..frames).map(|_| vec_of(dims.frame_dim, &mut rng)).collect(),
                text_feats: (0..2).map(|_| vec_of(dims.hidden_dim, &mut rng)).collect(),
                audio_frames: (0..2).map(|_| vec_of(dims.audio_dim, &mut rng)).collect(),
            };
            LabeledBundle { bundle, label }
        })
        .collect()
}
