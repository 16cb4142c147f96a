//! Entropy-gated two-stage classification cascade.
//!
//! A cheap stage-1 classifier scores every item; a gate measures how
//! uncertain that score is and forwards only the ambiguous items to an
//! expensive stage-2 classifier. Around that core sit the evaluation
//! metrics used to study the cost/quality tradeoff, a seeded synthetic
//! score generator, a small late-fusion model usable as a live stage, and a
//! mini-batch ingestion pipeline that writes scored items into an index.

pub mod cascade;
pub mod dataset;
pub mod gate;
pub mod metrics;
pub mod synth;
pub mod toyfusion;
pub mod types;
pub mod vmp;

pub use cascade::{
    classify, run_batch, run_batch_with_costs, BatchReport, Cascade, CascadeError,
    CascadeResult, Classifier, ClassifierError, ReplayCosts,
};
pub use gate::{confidence, decide, entropy, GateAction, GateDecision, GateError, GatePolicy};
pub use metrics::{MetricReport, MetricsError, OperatingPoint, PRCurve};
pub use types::{
    validate_prob_vector, LabeledExample, Metadata, ModelOutput, ProbError, ProbVector, Stage,
    VideoItem,
};
