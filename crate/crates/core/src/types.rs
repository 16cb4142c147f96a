//! Shared domain types: probability vectors, items, labeled examples and
//! model outputs. Everything here is immutable once constructed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toyfusion::FeatureBundle;

/// Absolute tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Index of the positive class for binary tasks.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbError {
    #[error("probability vector needs at least 2 classes, got {0}")]
    TooShort(usize),
    #[error("probability entry {index} = {value} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1 within {PROB_SUM_TOLERANCE}")]
    NotNormalized { sum: f64 },
}

/// A normalized class-probability distribution.
///
/// Inputs are validated but never renormalized: a vector that does not
/// already sum to one is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(raw: Vec<f64>) -> Result<Self, ProbError> {
        if raw.len() < 2 {
            return Err(ProbError::TooShort(raw.len()));
        }
        for (index, &value) in raw.iter().enumerate() {
            // NaN fails this check too.
            if !(0.0..=1.0).contains(&value) {
                return Err(ProbError::OutOfRange { index, value });
            }
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(ProbError::NotNormalized { sum });
        }
        Ok(ProbVector(raw))
    }

    /// Binary distribution `(1 - s, s)` from a positive-class score.
    pub fn binary(positive: f64) -> Result<Self, ProbError> {
        ProbVector::new(vec![1.0 - positive, positive])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied()
    }

    pub fn is_binary(&self) -> bool {
        self.0.len() == 2
    }

    /// Probability of class 1. Every `ProbVector` has at least two entries.
    pub fn positive(&self) -> f64 {
        self.0[POSITIVE_CLASS]
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = ProbError;

    fn try_from(raw: Vec<f64>) -> Result<Self, Self::Error> {
        ProbVector::new(raw)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Validates a raw list of reals as a probability vector.
pub fn validate_prob_vector(raw: &[f64]) -> Result<ProbVector, ProbError> {
    ProbVector::new(raw.to_vec())
}

pub type Metadata = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ItemError {
    #[error("item id is empty")]
    EmptyId,
    #[error("metadata value for `{key}` is not finite")]
    NonFiniteMetadata { key: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("stage-2 vector has {stage2} classes but stage-1 has {stage1}")]
    StageLengthMismatch { stage1: usize, stage2: usize },
}

/// A published video as seen by the classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoItem {
    pub id: String,
    #[serde(default)]
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureBundle>,
}

impl VideoItem {
    pub fn new(id: impl Into<String>, metadata: Metadata) -> Result<Self, ItemError> {
        let item = VideoItem {
            id: id.into(),
            metadata,
            features: None,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn with_features(mut self, features: FeatureBundle) -> Self {
        self.features = Some(features);
        self
    }

    pub fn validate(&self) -> Result<(), ItemError> {
        if self.id.is_empty() {
            return Err(ItemError::EmptyId);
        }
        if let Some((key, _)) = self.metadata.iter().find(|(_, v)| !v.is_finite()) {
            return Err(ItemError::NonFiniteMetadata { key: key.clone() });
        }
        Ok(())
    }
}

/// An item with recorded stage-1 (and optionally stage-2) scores and its
/// ground-truth label.
///
/// Serializes as one flat JSON object with the fields `id`, `stage1`,
/// `stage2`, `label` and `metadata`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExampleRecord", into = "ExampleRecord")]
pub struct LabeledExample {
    item: VideoItem,
    stage1: ProbVector,
    stage2: Option<ProbVector>,
    label: usize,
}

impl LabeledExample {
    pub fn new(
        item: VideoItem,
        stage1: ProbVector,
        stage2: Option<ProbVector>,
        label: usize,
    ) -> Result<Self, ItemError> {
        item.validate()?;
        if label >= stage1.num_classes() {
            return Err(ItemError::LabelOutOfRange {
                label,
                classes: stage1.num_classes(),
            });
        }
        if let Some(s2) = &stage2 {
            if s2.num_classes() != stage1.num_classes() {
                return Err(ItemError::StageLengthMismatch {
                    stage1: stage1.num_classes(),
                    stage2: s2.num_classes(),
                });
            }
        }
        Ok(LabeledExample {
            item,
            stage1,
            stage2,
            label,
        })
    }

    pub fn item(&self) -> &VideoItem {
        &self.item
    }

    pub fn id(&self) -> &str {
        &self.item.id
    }

    pub fn stage1(&self) -> &ProbVector {
        &self.stage1
    }

    pub fn stage2(&self) -> Option<&ProbVector> {
        self.stage2.as_ref()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn is_positive(&self) -> bool {
        self.label == POSITIVE_CLASS
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: String,
    stage1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage2: Option<Vec<f64>>,
    label: usize,
    #[serde(default)]
    metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<FeatureBundle>,
}

#[derive(Debug, Error)]
pub enum ExampleError {
    #[error("stage1: {0}")]
    Stage1(ProbError),
    #[error("stage2: {0}")]
    Stage2(ProbError),
    #[error(transparent)]
    Item(#[from] ItemError),
}

impl TryFrom<ExampleRecord> for LabeledExample {
    type Error = ExampleError;

    fn try_from(r: ExampleRecord) -> Result<Self, Self::Error> {
        let stage1 = ProbVector::new(r.stage1).map_err(ExampleError::Stage1)?;
        let stage2 = r
            .stage2
            .map(ProbVector::new)
            .transpose()
            .map_err(ExampleError::Stage2)?;
        let item = VideoItem {
            id: r.id,
            metadata: r.metadata,
            features: r.features,
        };
        Ok(LabeledExample::new(item, stage1, stage2, r.label)?)
    }
}

impl From<LabeledExample> for ExampleRecord {
    fn from(e: LabeledExample) -> Self {
        ExampleRecord {
            id: e.item.id,
            stage1: e.stage1.into(),
            stage2: e.stage2.map(Into::into),
            label: e.label,
            metadata: e.item.metadata,
            features: e.item.features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("cost_units must be finite and nonnegative, got {0}")]
pub struct InvalidCost(pub f64);

/// One classifier invocation's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub probs: ProbVector,
    pub model_id: String,
    pub cost_units: f64,
}

impl ModelOutput {
    pub fn new(
        probs: ProbVector,
        model_id: impl Into<String>,
        cost_units: f64,
    ) -> Result<Self, InvalidCost> {
        if !(cost_units.is_finite() && cost_units >= 0.0) {
            return Err(InvalidCost(cost_units));
        }
        Ok(ModelOutput {
            probs,
            model_id: model_id.into(),
            cost_units,
        })
    }
}

/// Which cascade stage produced a final score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Stage1 => f.write_str("stage1"),
            Stage::Stage2 => f.write_str("stage2"),
        }
    }
}
