//! Seeded generator of paired stage-1/stage-2 scores.
//!
//! Positive-class scores are drawn from `Beta(1 + sep, 1)` for positives and
//! `Beta(1, 1 + sep)` for negatives, sampled by inverting the closed-form
//! CDF so the output depends only on the seed and the ChaCha8 stream.
//! The two stages are conditionally independent given the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{LabeledExample, Metadata, ProbVector, VideoItem};

/// Smallest distance kept between a score and 0 or 1.
const SCORE_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("prevalence must be in (0, 1), got {0}")]
    Prevalence(f64),
    #[error("{which} separation must be finite and > 0, got {value}")]
    Separation { which: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub prevalence: f64,
    pub stage1_sep: f64,
    pub stage2_sep: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 10_000,
            prevalence: 0.3,
            stage1_sep: 2.0,
            stage2_sep: 8.0,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(SynthError::Prevalence(self.prevalence));
        }
        for (which, value) in [("stage1", self.stage1_sep), ("stage2", self.stage2_sep)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(SynthError::Separation { which, value });
            }
        }
        Ok(())
    }
}

/// Inverse-CDF draw of a class-conditional positive-class score.
fn class_score(positive: bool, sep: f64, u: f64) -> f64 {
    let x = u.powf(1.0 / (1.0 + sep));
    let s = if positive { x } else { 1.0 - x };
    s.clamp(SCORE_MARGIN, 1.0 - SCORE_MARGIN)
}

fn binary(score: f64) -> ProbVector {
    ProbVector::binary(score).expect("score clamped into (0, 1)")
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<LabeledExample>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n.saturating_sub(1).to_string().len().max(6);
    let examples = (0..spec.n)
        .map(|i| {
            let positive = rng.random::<f64>() < spec.prevalence;
            let s1 = class_score(positive, spec.stage1_sep, rng.random());
            let s2 = class_score(positive, spec.stage2_sep, rng.random());
            let vv = 10f64.powf(1.0 + 5.0 * rng.random::<f64>());
            let item = VideoItem {
                id: format!("v{i:0width$}"),
                metadata: Metadata::from([("vv".to_string(), vv)]),
                features: None,
            };
            LabeledExample::new(item, binary(s1), Some(binary(s2)), usize::from(positive))
                .expect("generated example is valid")
        })
        .collect();
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{f1_best, positive_labels, pr_curve, recall_at_precision};

    fn spec(n: usize, prevalence: f64, s1: f64, s2: f64, seed: u64) -> SynthSpec {
        SynthSpec { n, prevalence, stage1_sep: s1, stage2_sep: s2, seed }
    }

    fn stage_f1(data: &[LabeledExample], stage2: bool) -> f64 {
        let scores: Vec<f64> = data
            .iter()
            .map(|e| if stage2 { e.stage2().unwrap().positive() } else { e.stage1().positive() })
            .collect();
        f1_best(&pr_curve(&scores, &positive_labels(data)).unwrap()).unwrap().0
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(1000, 0.3, 1.0, 4.0, 7);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        assert_ne!(generate(&s).unwrap(), generate(&SynthSpec { seed: 8, ..s }).unwrap());
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(generate(&spec(10, 0.0, 1.0, 1.0, 1)).is_err());
        assert!(generate(&spec(10, 1.0, 1.0, 1.0, 1)).is_err());
        assert!(generate(&spec(10, 0.5, 0.0, 1.0, 1)).is_err());
        assert!(generate(&spec(10, 0.5, 1.0, f64::NAN, 1)).is_err());
    }

    #[test]
    fn scores_and_metadata_in_range() {
        let data = generate(&spec(5000, 0.3, 0.5, 30.0, 3)).unwrap();
        for e in &data {
            for p in [e.stage1(), e.stage2().unwrap()] {
                assert!(p.positive() > 0.0 && p.positive() < 1.0);
            }
            let vv = e.item().metadata["vv"];
            assert!((10.0..=1e6).contains(&vv));
        }
    }

    #[test]
    fn prevalence_within_three_sigma() {
        for seed in 0..10 {
            let n = 4000;
            let data = generate(&spec(n, 0.3, 1.0, 3.0, seed)).unwrap();
            let k = data.iter().filter(|e| e.is_positive()).count() as f64;
            let sigma = (n as f64 * 0.3 * 0.7).sqrt();
            assert!((k - 0.3 * n as f64).abs() <= 3.0 * sigma, "seed {seed}: {k}");
        }
    }

    #[test]
    fn uninformative_stage_has_chance_level_recall_at_p50() {
        // With prevalence 0.3, no threshold can sustain precision >= 0.5 for
        // long, so R@P50 stays small; a perfect-ish stage reaches ~1.
        let mut weak = 0.0;
        let mut strong = 0.0;
        for seed in 0..10 {
            let data = generate(&spec(2000, 0.3, 1e-6, 50.0, seed)).unwrap();
            let labels = positive_labels(&data);
            let s1: Vec<f64> = data.iter().map(|e| e.stage1().positive()).collect();
            let s2: Vec<f64> = data.iter().map(|e| e.stage2().unwrap().positive()).collect();
            weak += recall_at_precision(&pr_curve(&s1, &labels).unwrap(), 50.0).unwrap();
            strong += recall_at_precision(&pr_curve(&s2, &labels).unwrap(), 50.0).unwrap();
        }
        assert!(weak / 10.0 < 0.1, "weak R@P50 {}", weak / 10.0);
        assert!(strong / 10.0 > 0.95);
    }

    #[test]
    fn stronger_stage_has_higher_f1() {
        let data = generate(&spec(3000, 0.3, 1.0, 8.0, 11)).unwrap();
        assert!(stage_f1(&data, true) > stage_f1(&data, false));
    }

    #[test]
    fn f1_non_decreasing_in_separation() {
        let mean_f1 = |sep: f64| -> f64 {
            (0..10)
                .map(|seed| stage_f1(&generate(&spec(2000, 0.3, sep, 1.0, seed)).unwrap(), false))
                .sum::<f64>()
                / 10.0
        };
        let seps = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
        let f1s: Vec<f64> = seps.iter().map(|&s| mean_f1(s)).collect();
        for w in f1s.windows(2) {
            assert!(w[1] >= w[0], "{f1s:?}");
        }
    }
}
