//! Binary classification metrics: precision-recall operating points,
//! recall at a target precision, best F1, and the Beta-posterior variance
//! used to bound the uncertainty of reported operating points.
//!
//! Class 1 is the positive class. An item is predicted positive at
//! threshold `t` iff its score is `>= t`; equal scores always share an
//! operating point.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::LabeledExample;

/// Recall-at-precision targets reported by default (percent).
pub const DEFAULT_TARGETS: [f64; 5] = [50.0, 60.0, 70.0, 80.0, 90.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no positive labels")]
    NoPositives,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("target precision {0}% outside (0, 100]")]
    InvalidTarget(f64),
    #[error("no operating point reaches any requested precision target")]
    NoQualifyingPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
}

impl OperatingPoint {
    fn from_counts(threshold: f64, tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            1.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        OperatingPoint {
            threshold,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
        }
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision, self.recall)
    }
}

fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Operating points sorted by descending threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<OperatingPoint>,
}

/// Builds the curve with one point per distinct score.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PRCurve, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let negatives = labels.len() as u64 - positives;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // -0.0 and 0.0 are one threshold under `>=`
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint::from_counts(
            threshold,
            tp,
            fp,
            positives - tp,
            negatives - fp,
        ));
    }
    Ok(PRCurve { points })
}

/// Convenience wrapper for final positive-class scores and class labels.
pub fn pr_curve_for(scores: &[f64], labels: &[usize]) -> Result<PRCurve, MetricsError> {
    let labels: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    pr_curve(scores, &labels)
}

fn check_target(target_pct: f64) -> Result<(), MetricsError> {
    if target_pct > 0.0 && target_pct <= 100.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidTarget(target_pct))
    }
}

/// The operating point that realizes recall at `target_pct` precision: the
/// highest recall among points with `precision >= target_pct / 100`, taking
/// the highest threshold when several points share that recall.
pub fn point_at_precision(
    curve: &PRCurve,
    target_pct: f64,
) -> Result<Option<&OperatingPoint>, MetricsError> {
    check_target(target_pct)?;
    let min_precision = target_pct / 100.0;
    let mut best: Option<&OperatingPoint> = None;
    for point in curve.points.iter().filter(|p| p.precision >= min_precision) {
        if best.is_none_or(|b| point.recall > b.recall) {
            best = Some(point);
        }
    }
    Ok(best)
}

/// Maximum recall over points meeting the precision target; 0 when none does.
pub fn recall_at_precision(curve: &PRCurve, target_pct: f64) -> Result<f64, MetricsError> {
    Ok(point_at_precision(curve, target_pct)?.map_or(0.0, |p| p.recall))
}

/// Best F1 over all points and its threshold (ties go to the higher threshold).
pub fn f1_best(curve: &PRCurve) -> Result<(f64, f64), MetricsError> {
    let mut best: Option<(f64, f64)> = None;
    for point in &curve.points {
        let f1 = point.f1();
        if best.is_none_or(|(b, _)| f1 > b) {
            best = Some((f1, point.threshold));
        }
    }
    best.ok_or(MetricsError::Empty)
}

/// Variance of `Beta(tp + 1, fp + 1)`.
pub fn beta_variance(tp: u64, fp: u64) -> f64 {
    let alpha = tp as f64 + 1.0;
    let beta = fp as f64 + 1.0;
    let sum = alpha + beta;
    alpha * beta / (sum * sum * (sum + 1.0))
}

/// Largest Beta variance over the points realizing each target's recall.
/// Targets without a qualifying point are skipped.
pub fn max_beta_variance(curve: &PRCurve, targets_pct: &[f64]) -> Result<f64, MetricsError> {
    let mut max: Option<f64> = None;
    for &target in targets_pct {
        if let Some(point) = point_at_precision(curve, target)? {
            let v = beta_variance(point.tp, point.fp);
            max = Some(max.map_or(v, |m: f64| m.max(v)));
        }
    }
    max.ok_or(MetricsError::NoQualifyingPoint)
}

/// Formats a precision target as a map key: `70`, or `72.5`.
pub fn target_key(target_pct: f64) -> String {
    format!("{target_pct}")
}

/// F1, recall at each precision target and max Beta variance of one set of
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub f1_threshold: f64,
    pub r_at_p: BTreeMap<String, f64>,
    /// `null` when no operating point reaches any target.
    pub max_beta_variance: Option<f64>,
}

impl MetricReport {
    pub fn recall_at(&self, target_pct: f64) -> Option<f64> {
        self.r_at_p.get(&target_key(target_pct)).copied()
    }

    /// CSV with header `metric,target_pct,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,target_pct,value\n");
        let _ = writeln!(out, "f1,,{}", self.f1);
        let _ = writeln!(out, "f1_threshold,,{}", self.f1_threshold);
        let mut rows: Vec<(f64, &String, &f64)> = self
            .r_at_p
            .iter()
            .map(|(k, v)| (k.parse().unwrap_or(f64::NAN), k, v))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, k, v) in rows {
            let _ = writeln!(out, "r_at_p,{k},{v}");
        }
        match self.max_beta_variance {
            Some(v) => {
                let _ = writeln!(out, "max_beta_variance,,{v}");
            }
            None => out.push_str("max_beta_variance,,\n"),
        }
        out
    }
}

pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    targets_pct: &[f64],
) -> Result<MetricReport, MetricsError> {
    let curve = pr_curve(scores, labels)?;
    let (f1, f1_threshold) = f1_best(&curve)?;
    let mut r_at_p = BTreeMap::new();
    for &t in targets_pct {
        r_at_p.insert(target_key(t), recall_at_precision(&curve, t)?);
    }
    let max_beta_variance = match max_beta_variance(&curve, targets_pct) {
        Ok(v) => Some(v),
        Err(MetricsError::NoQualifyingPoint) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        f1,
        f1_threshold,
        r_at_p,
        max_beta_variance,
    })
}

/// Positive-class labels of a dataset.
pub fn positive_labels(examples: &[LabeledExample]) -> Vec<bool> {
    examples.iter().map(LabeledExample::is_positive).collect()
}
