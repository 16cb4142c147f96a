//! Two-stage cascade: a cheap stage-1 classifier, a gate, and an expensive
//! stage-2 classifier that only sees forwarded items.
//!
//! Retained items are finalized with their stage-1 distribution. A stage-2
//! failure does not fail the request: the stage-1 result is returned with
//! `stage2_fallback` set.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{decide, GateDecision, GateError, GatePolicy};
use crate::types::{LabeledExample, ModelOutput, ProbVector, Stage, VideoItem};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{model_id}: {message}")]
pub struct ClassifierError {
    pub model_id: String,
    pub message: String,
}

impl ClassifierError {
    pub fn new(model_id: impl Into<String>, message: impl Into<String>) -> Self {
        ClassifierError {
            model_id: model_id.into(),
            message: message.into(),
        }
    }
}

/// A scoring model. Implementations must be deterministic for a fixed item.
pub trait Classifier: Send + Sync {
    fn model_id(&self) -> &str;

    /// Abstract compute cost charged per call.
    fn cost_units(&self) -> f64;

    fn score(&self, item: &VideoItem) -> Result<ModelOutput, ClassifierError>;
}

impl<C: Classifier + ?Sized> Classifier for Arc<C> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn cost_units(&self) -> f64 {
        (**self).cost_units()
    }

    fn score(&self, item: &VideoItem) -> Result<ModelOutput, ClassifierError> {
        (**self).score(item)
    }
}

/// Looks up previously recorded distributions by item id.
#[derive(Debug, Clone)]
pub struct RecordedClassifier {
    model_id: String,
    cost_units: f64,
    scores: HashMap<String, ProbVector>,
}

impl RecordedClassifier {
    pub fn new(
        model_id: impl Into<String>,
        cost_units: f64,
        scores: HashMap<String, ProbVector>,
    ) -> Self {
        RecordedClassifier {
            model_id: model_id.into(),
            cost_units,
            scores,
        }
    }

    pub fn stage1_from(examples: &[LabeledExample], cost_units: f64) -> Self {
        let scores = examples
            .iter()
            .map(|e| (e.id().to_string(), e.stage1().clone()))
            .collect();
        RecordedClassifier::new("recorded-stage1", cost_units, scores)
    }

    /// Examples without a stage-2 vector are left out, so scoring them fails.
    pub fn stage2_from(examples: &[LabeledExample], cost_units: f64) -> Self {
        let scores = examples
            .iter()
            .filter_map(|e| e.stage2().map(|p| (e.id().to_string(), p.clone())))
            .collect();
        RecordedClassifier::new("recorded-stage2", cost_units, scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl Classifier for RecordedClassifier {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn cost_units(&self) -> f64 {
        self.cost_units
    }

    fn score(&self, item: &VideoItem) -> Result<ModelOutput, ClassifierError> {
        let probs = self
            .scores
            .get(&item.id)
            .ok_or_else(|| ClassifierError::new(&self.model_id, format!("no score for `{}`", item.id)))?;
        ModelOutput::new(probs.clone(), &self.model_id, self.cost_units)
            .map_err(|e| ClassifierError::new(&self.model_id, e.to_string()))
    }
}

/// Returns the same distribution for every item.
#[derive(Debug, Clone)]
pub struct FixedClassifier {
    model_id: String,
    cost_units: f64,
    probs: ProbVector,
}

impl FixedClassifier {
    pub fn new(model_id: impl Into<String>, cost_units: f64, probs: ProbVector) -> Self {
        FixedClassifier {
            model_id: model_id.into(),
            cost_units,
            probs,
        }
    }
}

impl Classifier for FixedClassifier {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn cost_units(&self) -> f64 {
        self.cost_units
    }

    fn score(&self, _item: &VideoItem) -> Result<ModelOutput, ClassifierError> {
        ModelOutput::new(self.probs.clone(), &self.model_id, self.cost_units)
            .map_err(|e| ClassifierError::new(&self.model_id, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CascadeError {
    #[error("{stage} failed: {cause}")]
    StageFailure { stage: Stage, cause: ClassifierError },
    #[error("gate: {0}")]
    Gate(#[from] GateError),
    #[error("example `{0}` was forwarded but has no stage-2 score")]
    MissingStage2Score(String),
    #[error("stage-2 returned {stage2} classes, stage-1 returned {stage1}")]
    ClassCountMismatch { stage1: usize, stage2: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub final_probs: ProbVector,
    pub stage_used: Stage,
    pub gate: GateDecision,
    pub cost_units: f64,
    /// Set when the item was forwarded but stage 2 failed and the stage-1
    /// distribution was kept.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stage2_fallback: bool,
}

/// Runs one item through stage 1, the gate and (if forwarded) stage 2.
pub fn classify(
    item: &VideoItem,
    stage1: &dyn Classifier,
    policy: &GatePolicy,
    stage2: &dyn Classifier,
) -> Result<CascadeResult, CascadeError> {
    let first = stage1
        .score(item)
        .map_err(|cause| CascadeError::StageFailure {
            stage: Stage::Stage1,
            cause,
        })?;
    let gate = decide(policy, &first.probs, &item.metadata)?;
    if !gate.is_forward() {
        return Ok(CascadeResult {
            final_probs: first.probs,
            stage_used: Stage::Stage1,
            gate,
            cost_units: first.cost_units,
            stage2_fallback: false,
        });
    }
    let second = stage2.score(item).and_then(|out| {
        if out.probs.num_classes() == first.probs.num_classes() {
            Ok(out)
        } else {
            Err(ClassifierError::new(
                stage2.model_id(),
                format!(
                    "returned {} classes, stage 1 returned {}",
                    out.probs.num_classes(),
                    first.probs.num_classes()
                ),
            ))
        }
    });
    Ok(match second {
        Ok(out) => CascadeResult {
            final_probs: out.probs,
            stage_used: Stage::Stage2,
            gate,
            cost_units: first.cost_units + out.cost_units,
            stage2_fallback: false,
        },
        Err(_) => CascadeResult {
            final_probs: first.probs,
            stage_used: Stage::Stage1,
            gate,
            cost_units: first.cost_units + stage2.cost_units(),
            stage2_fallback: true,
        },
    })
}

/// A configured cascade, convenient when the same stages and policy score
/// many items.
#[derive(Clone)]
pub struct Cascade {
    pub stage1: Arc<dyn Classifier>,
    pub stage2: Arc<dyn Classifier>,
    pub policy: GatePolicy,
}

impl Cascade {
    pub fn new(stage1: Arc<dyn Classifier>, policy: GatePolicy, stage2: Arc<dyn Classifier>) -> Self {
        Cascade {
            stage1,
            stage2,
            policy,
        }
    }

    pub fn classify(&self, item: &VideoItem) -> Result<CascadeResult, CascadeError> {
        classify(item, self.stage1.as_ref(), &self.policy, self.stage2.as_ref())
    }
}

/// Per-call costs charged when replaying recorded scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayCosts {
    pub stage1: f64,
    pub stage2: f64,
}

impl Default for ReplayCosts {
    fn default() -> Self {
        ReplayCosts {
            stage1: 1.0,
            stage2: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub total: usize,
    pub forwarded: usize,
    pub qps_ratio_pct: f64,
    pub total_cost_units: f64,
    /// Input-ordered per-item results; dropped by [`BatchReport::summary`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<CascadeResult>,
}

impl BatchReport {
    /// The same report without per-item results.
    pub fn summary(&self) -> BatchReport {
        BatchReport {
            results: Vec::new(),
            ..self.clone()
        }
    }

    /// Final positive-class scores, in input order.
    pub fn final_scores(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.final_probs.positive()).collect()
    }
}

/// Percentage of items forwarded to stage 2; zero for an empty batch.
pub fn qps_ratio_pct(forwarded: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * forwarded as f64 / total as f64
    }
}

/// Replays recorded scores through the gate with unit costs.
pub fn run_batch(
    examples: &[LabeledExample],
    policy: &GatePolicy,
) -> Result<BatchReport, CascadeError> {
    run_batch_with_costs(examples, policy, ReplayCosts::default())
}

/// Replays recorded stage-1 scores through the gate without invoking any
/// model; forwarded items take their recorded stage-2 scores.
pub fn run_batch_with_costs(
    examples: &[LabeledExample],
    policy: &GatePolicy,
    costs: ReplayCosts,
) -> Result<BatchReport, CascadeError> {
    policy.validate()?;
    let mut results = Vec::with_capacity(examples.len());
    let mut forwarded = 0usize;
    for ex in examples {
        let gate = decide(policy, ex.stage1(), &ex.item().metadata)?;
        let result = if gate.is_forward() {
            forwarded += 1;
            let stage2 = ex
                .stage2()
                .ok_or_else(|| CascadeError::MissingStage2Score(ex.id().to_string()))?;
            CascadeResult {
                final_probs: stage2.clone(),
                stage_used: Stage::Stage2,
                gate,
                cost_units: costs.stage1 + costs.stage2,
                stage2_fallback: false,
            }
        } else {
            CascadeResult {
                final_probs: ex.stage1().clone(),
                stage_used: Stage::Stage1,
                gate,
                cost_units: costs.stage1,
                stage2_fallback: false,
            }
        };
        results.push(result);
    }
    let total = examples.len();
    Ok(BatchReport {
        total,
        forwarded,
        qps_ratio_pct: qps_ratio_pct(forwarded, total),
        total_cost_units: total as f64 * costs.stage1 + forwarded as f64 * costs.stage2,
        results,
    })
}
