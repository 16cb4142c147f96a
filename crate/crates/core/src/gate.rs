//! Uncertainty scores and the routing policies that decide which stage-1
//! outputs are re-scored by stage 2.
//!
//! Entropy is measured in bits, so a binary distribution scores in `[0, 1]`.
//! Every leaf forwards when its score is greater than or equal to its
//! threshold; a threshold of zero therefore forwards everything.
//!
//! The confidence gate forwards items whose positive-class probability is
//! at least the threshold. It re-checks flagged positives, which is what a
//! high-recall first stage followed by a false-positive-reducing second
//! stage needs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Metadata, ProbVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error("confidence gate needs a binary distribution, got {0} classes")]
    NonBinary(usize),
    #[error("metadata key `{0}` is missing")]
    MissingMetadataKey(String),
    #[error("invalid gate policy: {0}")]
    InvalidPolicy(String),
}

/// Shannon entropy in bits, with `0 * log 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    let h: f64 = p
        .probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.log2())
        .sum();
    // -0.0 for degenerate distributions
    h.max(0.0)
}

/// Positive-class probability of a binary distribution.
pub fn confidence(p: &ProbVector) -> Result<f64, GateError> {
    if !p.is_binary() {
        return Err(GateError::NonBinary(p.num_classes()));
    }
    Ok(p.positive())
}

/// A routing rule. Serialized with a `kind` tag, for example
/// `{"kind":"entropy","threshold":0.6}` or `{"kind":"all_of","children":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawPolicy")]
pub enum GatePolicy {
    Entropy {
        threshold: f64,
    },
    Confidence {
        threshold: f64,
    },
    MetadataPredicate {
        predicate_key: String,
        predicate_min: f64,
    },
    AllOf {
        children: Vec<GatePolicy>,
    },
    AnyOf {
        children: Vec<GatePolicy>,
    },
}

// Unvalidated mirror used for deserialization.
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawPolicy {
    Entropy {
        threshold: f64,
    },
    Confidence {
        threshold: f64,
    },
    MetadataPredicate {
        predicate_key: String,
        predicate_min: f64,
    },
    AllOf {
        children: Vec<GatePolicy>,
    },
    AnyOf {
        children: Vec<GatePolicy>,
    },
}

impl TryFrom<RawPolicy> for GatePolicy {
    type Error = GateError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        let policy = match raw {
            RawPolicy::Entropy { threshold } => GatePolicy::Entropy { threshold },
            RawPolicy::Confidence { threshold } => GatePolicy::Confidence { threshold },
            RawPolicy::MetadataPredicate {
                predicate_key,
                predicate_min,
            } => GatePolicy::MetadataPredicate {
                predicate_key,
                predicate_min,
            },
            RawPolicy::AllOf { children } => GatePolicy::AllOf { children },
            RawPolicy::AnyOf { children } => GatePolicy::AnyOf { children },
        };
        policy.validate_node()?;
        Ok(policy)
    }
}

impl GatePolicy {
    pub fn entropy(threshold: f64) -> Self {
        GatePolicy::Entropy { threshold }
    }

    pub fn confidence(threshold: f64) -> Self {
        GatePolicy::Confidence { threshold }
    }

    pub fn metadata_at_least(key: impl Into<String>, min: f64) -> Self {
        GatePolicy::MetadataPredicate {
            predicate_key: key.into(),
            predicate_min: min,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GatePolicy::Entropy { .. } => "entropy",
            GatePolicy::Confidence { .. } => "confidence",
            GatePolicy::MetadataPredicate { .. } => "metadata_predicate",
            GatePolicy::AllOf { .. } => "all_of",
            GatePolicy::AnyOf { .. } => "any_of",
        }
    }

    fn validate_node(&self) -> Result<(), GateError> {
        match self {
            GatePolicy::Entropy { threshold } if !(threshold.is_finite() && *threshold >= 0.0) => {
                Err(GateError::InvalidPolicy(format!(
                    "entropy threshold must be finite and >= 0, got {threshold}"
                )))
            }
            GatePolicy::Confidence { threshold } if !(0.0..=1.0).contains(threshold) => {
                Err(GateError::InvalidPolicy(format!(
                    "confidence threshold must be in [0, 1], got {threshold}"
                )))
            }
            GatePolicy::MetadataPredicate { predicate_min, .. } if predicate_min.is_nan() => Err(
                GateError::InvalidPolicy("metadata predicate_min is NaN".into()),
            ),
            GatePolicy::AllOf { children } | GatePolicy::AnyOf { children }
                if children.is_empty() =>
            {
                Err(GateError::InvalidPolicy(format!(
                    "{} needs at least one child",
                    self.kind()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Checks the invariants of this node and all of its descendants.
    pub fn validate(&self) -> Result<(), GateError> {
        self.validate_node()?;
        if let GatePolicy::AllOf { children } | GatePolicy::AnyOf { children } = self {
            children.iter().try_for_each(GatePolicy::validate)?;
        }
        Ok(())
    }

    /// Parses and validates a policy from JSON text.
    pub fn from_json(text: &str) -> Result<Self, GateError> {
        serde_json::from_str(text).map_err(|e| GateError::InvalidPolicy(e.to_string()))
    }
}

impl fmt::Display for GatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match serde_json::to_string(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => f.write_str(self.kind()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateAction {
    Forward,
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub action: GateAction,
    pub score: f64,
    pub policy_kind: String,
}

impl GateDecision {
    pub fn is_forward(&self) -> bool {
        self.action == GateAction::Forward
    }
}

/// Applies `policy` to a stage-1 distribution and the item's metadata.
///
/// Composite nodes evaluate every child (so a missing metadata key is
/// reported regardless of child order) and report the first child's score.
pub fn decide(
    policy: &GatePolicy,
    stage1: &ProbVector,
    metadata: &Metadata,
) -> Result<GateDecision, GateError> {
    let (forward, score) = evaluate(policy, stage1, metadata)?;
    Ok(GateDecision {
        action: if forward {
            GateAction::Forward
        } else {
            GateAction::Retain
        },
        score,
        policy_kind: policy.kind().to_string(),
    })
}

fn evaluate(
    policy: &GatePolicy,
    stage1: &ProbVector,
    metadata: &Metadata,
) -> Result<(bool, f64), GateError> {
    policy.validate_node()?;
    match policy {
        GatePolicy::Entropy { threshold } => {
            let h = entropy(stage1);
            Ok((h >= *threshold, h))
        }
        GatePolicy::Confidence { threshold } => {
            let c = confidence(stage1)?;
            Ok((c >= *threshold, c))
        }
        GatePolicy::MetadataPredicate {
            predicate_key,
            predicate_min,
        } => {
            let value = *metadata
                .get(predicate_key)
                .ok_or_else(|| GateError::MissingMetadataKey(predicate_key.clone()))?;
            Ok((value >= *predicate_min, value))
        }
        GatePolicy::AllOf { children } | GatePolicy::AnyOf { children } => {
            let results = children
                .iter()
                .map(|c| evaluate(c, stage1, metadata))
                .collect::<Result<Vec<_>, _>>()?;
            let forward = if matches!(policy, GatePolicy::AllOf { .. }) {
                results.iter().all(|(f, _)| *f)
            } else {
                results.iter().any(|(f, _)| *f)
            };
            Ok((forward, results[0].1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(a: f64, b: f64) -> ProbVector {
        ProbVector::new(vec![a, b]).unwrap()
    }

    fn no_meta() -> Metadata {
        Metadata::new()
    }

    // Independent evaluation of -sum p log2 p via natural logs.
    fn entropy_oracle(v: &[f64]) -> f64 {
        v.iter()
            .map(|&x| if x == 0.0 { 0.0 } else { -x * x.ln() / std::f64::consts::LN_2 })
            .sum()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&p(0.5, 0.5)), 1.0);
        assert_eq!(entropy(&p(1.0, 0.0)), 0.0);
        assert!((entropy(&p(0.9, 0.1)) - 0.46900).abs() < 1e-4);
        assert!((entropy(&p(0.9, 0.1)) - entropy_oracle(&[0.9, 0.1])).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_uniform_over_n_classes() {
        let v = ProbVector::new(vec![0.25; 4]).unwrap();
        assert!((entropy(&v) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&p(0.2, 0.8)).unwrap(), 0.8);
        assert_eq!(confidence(&p(1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(confidence(&p(0.45, 0.55)).unwrap(), 0.55);
        let tri = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(confidence(&tri), Err(GateError::NonBinary(3)));
    }

    #[test]
    fn decide_examples() {
        let d = decide(&GatePolicy::entropy(0.6), &p(0.5, 0.5), &no_meta()).unwrap();
        assert_eq!(d.action, GateAction::Forward);
        assert_eq!(d.score, 1.0);
        assert_eq!(d.policy_kind, "entropy");

        let d = decide(&GatePolicy::entropy(0.6), &p(0.99, 0.01), &no_meta()).unwrap();
        assert_eq!(d.action, GateAction::Retain);
        assert!((d.score - 0.0808).abs() < 1e-3);
        assert!((d.score - entropy_oracle(&[0.99, 0.01])).abs() < 1e-12);

        let policy = GatePolicy::AllOf {
            children: vec![
                GatePolicy::entropy(0.3),
                GatePolicy::metadata_at_least("vv", 100.0),
            ],
        };
        let meta = Metadata::from([("vv".to_string(), 50.0)]);
        let d = decide(&policy, &p(0.5, 0.5), &meta).unwrap();
        assert_eq!(d.action, GateAction::Retain);
        assert_eq!(d.score, 1.0);
        assert_eq!(d.policy_kind, "all_of");
    }

    #[test]
    fn any_of_forwards_on_single_child() {
        let policy = GatePolicy::AnyOf {
            children: vec![
                GatePolicy::entropy(0.9),
                GatePolicy::metadata_at_least("vv", 100.0),
            ],
        };
        let meta = Metadata::from([("vv".to_string(), 500.0)]);
        let d = decide(&policy, &p(0.99, 0.01), &meta).unwrap();
        assert!(d.is_forward());
    }

    #[test]
    fn missing_metadata_key() {
        let policy = GatePolicy::metadata_at_least("vv", 1.0);
        assert_eq!(
            decide(&policy, &p(0.5, 0.5), &no_meta()),
            Err(GateError::MissingMetadataKey("vv".into()))
        );
    }

    #[test]
    fn zero_threshold_forwards_everything() {
        let d = decide(&GatePolicy::entropy(0.0), &p(1.0, 0.0), &no_meta()).unwrap();
        assert!(d.is_forward());
    }

    #[test]
    fn policy_json_shapes() {
        let e: GatePolicy = serde_json::from_str(r#"{"kind":"entropy","threshold":0.6}"#).unwrap();
        assert_eq!(e, GatePolicy::entropy(0.6));
        let json = r#"{"kind":"all_of","children":[{"kind":"confidence","threshold":0.5},{"kind":"metadata_predicate","predicate_key":"vv","predicate_min":100.0}]}"#;
        let c: GatePolicy = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), json);
    }

    #[test]
    fn invalid_policies_rejected() {
        for bad in [
            r#"{"kind":"foo","threshold":0.6}"#,
            r#"{"kind":"entropy","threshold":-0.1}"#,
            r#"{"kind":"confidence","threshold":1.5}"#,
            r#"{"kind":"any_of","children":[]}"#,
            r#"{"kind":"all_of","children":[{"kind":"entropy","threshold":-1}]}"#,
        ] {
            assert!(GatePolicy::from_json(bad).is_err(), "{bad}");
        }
        let built = GatePolicy::AnyOf { children: vec![] };
        assert!(built.validate().is_err());
        assert!(decide(&built, &p(0.5, 0.5), &no_meta()).is_err());
    }

    proptest! {
        #[test]
        fn entropy_permutation_invariant_and_bounded(s in 0.0f64..=1.0) {
            let a = entropy(&p(1.0 - s, s));
            let b = entropy(&p(s, 1.0 - s));
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn entropy_uniquely_maximized_at_uniform(s in 0.0f64..=1.0) {
            prop_assume!((s - 0.5).abs() > 1e-6);
            prop_assert!(entropy(&p(1.0 - s, s)) < 1.0);
        }

        #[test]
        fn entropy_gate_monotone_in_threshold(s in 0.0f64..=1.0, t1 in 0.0f64..1.2, t2 in 0.0f64..1.2) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let probs = p(1.0 - s, s);
            let at_hi = decide(&GatePolicy::entropy(hi), &probs, &no_meta()).unwrap();
            let at_lo = decide(&GatePolicy::entropy(lo), &probs, &no_meta()).unwrap();
            if at_hi.is_forward() {
                prop_assert!(at_lo.is_forward());
            }
        }

        #[test]
        fn decide_is_pure(s in 0.0f64..=1.0, t in 0.0f64..1.0, vv in 0.0f64..1e6) {
            let policy = GatePolicy::AnyOf {
                children: vec![GatePolicy::confidence(t), GatePolicy::metadata_at_least("vv", 1e3)],
            };
            let meta = Metadata::from([("vv".to_string(), vv)]);
            let probs = p(1.0 - s, s);
            prop_assert_eq!(decide(&policy, &probs, &meta), decide(&policy, &probs, &meta));
        }
    }
}
