use gatecascade_core::cascade::run_batch;
use gatecascade_core::metrics::{evaluate, positive_labels, MetricReport};
use gatecascade_core::types::LabeledExample;
use gatecascade_core::CascadeError;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::sweep::GateKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Stage1,
    Stage2,
    Cascade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub which: Which,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

/// Scores one stage, or the cascade at `tau`, against the dataset labels.
pub fn eval(
    examples: &[LabeledExample],
    which: Which,
    gate: GateKind,
    tau: f64,
    targets_pct: &[f64],
) -> Result<EvalReport, HarnessError> {
    let labels = positive_labels(examples);
    let scores: Vec<f64> = match which {
        Which::Stage1 => examples.iter().map(|e| e.stage1().positive()).collect(),
        Which::Stage2 => examples
            .iter()
            .map(|e| {
                e.stage2()
                    .map(|p| p.positive())
                    .ok_or_else(|| CascadeError::MissingStage2Score(e.id().to_string()))
            })
            .collect::<Result<_, _>>()?,
        Which::Cascade => run_batch(examples, &gate.policy(tau))?.final_scores(),
    };
    let cascade = which == Which::Cascade;
    Ok(EvalReport {
        which,
        gate: cascade.then_some(gate),
        tau: cascade.then_some(tau),
        metrics: evaluate(&scores, &labels, targets_pct)?,
    })
}
