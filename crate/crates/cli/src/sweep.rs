//! Threshold sweeps over recorded stage scores.

use std::collections::BTreeMap;

use gatecascade_core::cascade::{run_batch, CascadeError};
use gatecascade_core::gate::{entropy, GatePolicy};
use gatecascade_core::metrics::{evaluate, positive_labels, target_key, MetricReport};
use gatecascade_core::types::LabeledExample;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::pct1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Entropy,
    Confidence,
}

impl GateKind {
    pub fn policy(self, tau: f64) -> GatePolicy {
        match self {
            GateKind::Entropy => GatePolicy::entropy(tau),
            GateKind::Confidence => GatePolicy::confidence(tau),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Entropy => "entropy",
            GateKind::Confidence => "confidence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Cascade,
    Stage1Only,
    Stage2Only,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            RowKind::Cascade => "cascade",
            RowKind::Stage1Only => "stage1_only",
            RowKind::Stage2Only => "stage2_only",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [RowKind::Cascade, RowKind::Stage1Only, RowKind::Stage2Only]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: RowKind,
    /// Gate kind and threshold; absent on baseline rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub forwarded: usize,
    pub total: usize,
    pub qps_ratio_pct: f64,
    pub f1: f64,
    pub f1_threshold: f64,
    pub r_at_p: BTreeMap<String, f64>,
    pub max_beta_variance: Option<f64>,
}

impl SweepRow {
    fn new(
        kind: RowKind,
        gate: Option<(GateKind, f64)>,
        forwarded: usize,
        total: usize,
        metrics: MetricReport,
    ) -> Self {
        SweepRow {
            kind,
            gate: gate.map(|g| g.0),
            tau: gate.map(|g| g.1),
            forwarded,
            total,
            qps_ratio_pct: gatecascade_core::cascade::qps_ratio_pct(forwarded, total),
            f1: metrics.f1,
            f1_threshold: metrics.f1_threshold,
            r_at_p: metrics.r_at_p,
            max_beta_variance: metrics.max_beta_variance,
        }
    }

    pub fn recall_at(&self, target_pct: f64) -> Option<f64> {
        self.r_at_p.get(&target_key(target_pct)).copied()
    }

    /// True when every metric column matches `other` exactly.
    pub fn same_metrics(&self, other: &SweepRow) -> bool {
        self.f1 == other.f1
            && self.f1_threshold == other.f1_threshold
            && self.r_at_p == other.r_at_p
            && self.max_beta_variance == other.max_beta_variance
    }
}

/// Entropy and confidence gates tuned to forward (nearly) the same items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateComparison {
    pub entropy: SweepRow,
    pub confidence: SweepRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub targets_pct: Vec<f64>,
    /// Cascade rows in ascending threshold order.
    pub rows: Vec<SweepRow>,
    pub stage1_only: SweepRow,
    pub stage2_only: SweepRow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<GateComparison>,
}

fn stage_scores(examples: &[LabeledExample], stage2: bool) -> Result<Vec<f64>, CascadeError> {
    examples
        .iter()
        .map(|e| {
            if stage2 {
                e.stage2()
                    .map(|p| p.positive())
                    .ok_or_else(|| CascadeError::MissingStage2Score(e.id().to_string()))
            } else {
                Ok(e.stage1().positive())
            }
        })
        .collect()
}

/// Replays the dataset through a gate at `tau` and scores the result.
pub fn cascade_row(
    examples: &[LabeledExample],
    gate: GateKind,
    tau: f64,
    targets_pct: &[f64],
) -> Result<SweepRow, HarnessError> {
    let report = run_batch(examples, &gate.policy(tau))?;
    let metrics = evaluate(&report.final_scores(), &positive_labels(examples), targets_pct)?;
    Ok(SweepRow::new(
        RowKind::Cascade,
        Some((gate, tau)),
        report.forwarded,
        report.total,
        metrics,
    ))
}

pub fn sweep(
    examples: &[LabeledExample],
    taus: &[f64],
    targets_pct: &[f64],
    gate: GateKind,
) -> Result<SweepReport, HarnessError> {
    let labels = positive_labels(examples);
    let n = examples.len();
    let stage1 = evaluate(&stage_scores(examples, false)?, &labels, targets_pct)?;
    let stage2 = evaluate(&stage_scores(examples, true)?, &labels, targets_pct)?;
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);
    let rows = taus
        .iter()
        .map(|&tau| cascade_row(examples, gate, tau, targets_pct))
        .collect::<Result<_, _>>()?;
    Ok(SweepReport {
        targets_pct: targets_pct.to_vec(),
        rows,
        stage1_only: SweepRow::new(RowKind::Stage1Only, None, 0, n, stage1),
        stage2_only: SweepRow::new(RowKind::Stage2Only, None, n, n, stage2),
        comparison: None,
    })
}

/// Confidence threshold whose forwarded count is closest to `target`, found
/// by binary search over the distinct stage-1 positive scores. Returns the
/// threshold and its forwarded count.
pub fn match_confidence(examples: &[LabeledExample], target: usize) -> (f64, usize) {
    let mut scores: Vec<f64> = examples.iter().map(|e| e.stage1().positive()).collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    // Forwarded count at threshold t is the number of scores >= t.
    let count = |t: f64| n - scores.partition_point(|&s| s < t);
    let mut distinct = scores.clone();
    distinct.dedup();
    let Some(&max) = distinct.last() else {
        return (1.0, 0);
    };
    // Candidate thresholds, counts strictly decreasing: each distinct score,
    // then one just above the maximum (forwards nothing).
    let mut candidates = distinct;
    candidates.push(max.next_up());
    // First candidate whose count is <= target.
    let idx = candidates.partition_point(|&t| count(t) > target);
    let mut best = candidates[idx.min(candidates.len() - 1)];
    if idx > 0 {
        let below = candidates[idx - 1];
        if count(below).abs_diff(target) < count(best).abs_diff(target) {
            best = below;
        }
    }
    (best, count(best))
}

/// Runs the entropy gate at `entropy_tau`, then a confidence gate matched to
/// the same forwarded count.
pub fn compare_gates(
    examples: &[LabeledExample],
    entropy_tau: f64,
    targets_pct: &[f64],
) -> Result<GateComparison, HarnessError> {
    let entropy_row = cascade_row(examples, GateKind::Entropy, entropy_tau, targets_pct)?;
    let (tau, _) = match_confidence(examples, entropy_row.forwarded);
    let confidence_row = cascade_row(examples, GateKind::Confidence, tau, targets_pct)?;
    Ok(GateComparison {
        entropy: entropy_row,
        confidence: confidence_row,
    })
}

/// Number of items an entropy gate at `tau` forwards, recounted directly.
pub fn entropy_forward_count(examples: &[LabeledExample], tau: f64) -> usize {
    examples.iter().filter(|e| entropy(e.stage1()) >= tau).count()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepReport {
    /// Every row in output order: cascade rows, baselines, then the matched
    /// comparison pair if present.
    pub fn all_rows(&self) -> Vec<(&'static str, &SweepRow)> {
        let mut out: Vec<(&'static str, &SweepRow)> = self.rows.iter().map(|r| ("sweep", r)).collect();
        out.push(("baseline", &self.stage1_only));
        out.push(("baseline", &self.stage2_only));
        if let Some(c) = &self.comparison {
            out.push(("matched", &c.entropy));
            out.push(("matched", &c.confidence));
        }
        out
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "section",
            "kind",
            "gate",
            "tau",
            "forwarded",
            "total",
            "qps_ratio_pct",
            "f1",
            "f1_threshold",
            "max_beta_variance",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(self.targets_pct.iter().map(|t| format!("r_at_p{}", target_key(*t))));
        h
    }

    /// Full-precision CSV, one line per row.
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| HarnessError::Io(std::io::Error::other(e));
        w.write_record(self.header()).map_err(csv_err)?;
        for (section, row) in self.all_rows() {
            let mut rec = vec![
                section.to_string(),
                row.kind.name().to_string(),
                row.gate.map(|g| g.name().to_string()).unwrap_or_default(),
                opt(row.tau),
                row.forwarded.to_string(),
                row.total.to_string(),
                row.qps_ratio_pct.to_string(),
                row.f1.to_string(),
                row.f1_threshold.to_string(),
                opt(row.max_beta_variance),
            ];
            rec.extend(self.targets_pct.iter().map(|t| opt(row.recall_at(*t))));
            w.write_record(rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses the output of [`SweepReport::to_csv`] back into rows, tagged
    /// with their section.
    pub fn rows_from_csv(text: &str) -> Result<Vec<(String, SweepRow)>, HarnessError> {
        let bad = |m: String| HarnessError::Usage(format!("sweep csv: {m}"));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let num = |s: &str| -> Result<f64, HarnessError> { s.parse().map_err(|_| bad(format!("not a number: {s}"))) };
        let opt_num = |s: &str| -> Result<Option<f64>, HarnessError> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let gate = match &rec[2] {
                "" => None,
                "entropy" => Some(GateKind::Entropy),
                "confidence" => Some(GateKind::Confidence),
                other => return Err(bad(format!("unknown gate {other}"))),
            };
            let mut r_at_p = BTreeMap::new();
            for (name, value) in header.iter().zip(rec.iter()).skip(10) {
                let key = name.trim_start_matches("r_at_p").to_string();
                r_at_p.insert(key, num(value)?);
            }
            let row = SweepRow {
                kind: RowKind::parse(&rec[1]).ok_or_else(|| bad(format!("unknown kind {}", &rec[1])))?,
                gate,
                tau: opt_num(&rec[3])?,
                forwarded: num(&rec[4])? as usize,
                total: num(&rec[5])? as usize,
                qps_ratio_pct: num(&rec[6])?,
                f1: num(&rec[7])?,
                f1_threshold: num(&rec[8])?,
                max_beta_variance: opt_num(&rec[9])?,
                r_at_p,
            };
            rows.push((rec[0].to_string(), row));
        }
        Ok(rows)
    }

    /// Human-readable table with one-decimal percentages.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:<11} {:>7} {:>7} {:>6}", "row", "gate", "tau", "QPS%", "F1%");
        for t in &self.targets_pct {
            out.push_str(&format!(" {:>8}", format!("R@P{}", target_key(*t))));
        }
        out.push('\n');
        for (_, row) in self.all_rows() {
            out.push_str(&format!(
                "{:<12} {:<11} {:>7} {:>7} {:>6}",
                row.kind.name(),
                row.gate.map(GateKind::name).unwrap_or("-"),
                row.tau.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into()),
                pct1(row.qps_ratio_pct),
                pct1(100.0 * row.f1),
            ));
            for t in &self.targets_pct {
                out.push_str(&format!(" {:>8}", row.recall_at(*t).map(|r| pct1(100.0 * r)).unwrap_or_default()));
            }
            out.push('\n');
        }
        out
    }
}
