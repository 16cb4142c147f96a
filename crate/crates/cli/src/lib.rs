//! Experiment harness behind the `gatecascade` command: metric reports for
//! single stages or the cascade, threshold sweeps with stage baselines, and
//! entropy-versus-confidence comparisons at a matched forwarding rate.

pub mod error;
pub mod eval;
pub mod sweep;

pub use error::HarnessError;
pub use eval::{eval, EvalReport, Which};
pub use sweep::{
    compare_gates, match_confidence, sweep, GateComparison, GateKind, RowKind, SweepReport, SweepRow,
};

/// Formats a percentage with one decimal for human-readable tables.
pub fn pct1(value_pct: f64) -> String {
    format!("{value_pct:.1}")
}
