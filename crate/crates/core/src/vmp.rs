//! Mini-batch ingestion pipeline: Source -> Retriever -> Filter -> Sink.
//!
//! The source polls published-video messages in batches, the retriever
//! fetches features and scores each item through the cascade, the filter
//! assigns a remained/removed/ignored disposition, and the sink applies it
//! to a key-value index keyed by video id.
//!
//! Stages run on their own threads connected by bounded queues of capacity
//! one, so at most one batch is in flight between any two stages. Batches
//! are handed off in order, which makes the result identical to running the
//! batches sequentially. Per-item failures go to a dead-letter list; only
//! configuration and stream errors abort a run.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::{Cascade, CascadeError, Classifier, FixedClassifier, RecordedClassifier};
use crate::dataset::{self, DatasetError};
use crate::gate::{GateAction, GatePolicy};
use crate::toyfusion::{FusionClassifier, FusionParams};
use crate::types::{LabeledExample, Metadata, ProbVector, Stage, VideoItem};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum VmpError {
    #[error("stream is closed")]
    StreamClosed,
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("stream: {0}")]
    Stream(#[from] DatasetError),
    #[error("config: {0}")]
    Config(String),
    #[error("pipeline stage `{0}` stopped unexpectedly")]
    StageStopped(&'static str),
}

/// A published-video event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishMessage {
    pub video_id: String,
    #[serde(default)]
    pub payload: Metadata,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub event_time: i64,
}

/// An offset-tracked source of messages.
pub trait MessageStream: Send {
    /// Returns up to `max` messages and advances the offset past them.
    /// An exhausted stream returns an empty batch.
    fn fetch(&mut self, max: usize) -> Result<Vec<PublishMessage>, VmpError>;

    /// Number of messages consumed so far.
    fn offset(&self) -> u64;
}

/// In-process queue; also what JSONL message files load into.
#[derive(Debug, Clone, Default)]
pub struct MemoryStream {
    messages: Vec<PublishMessage>,
    offset: usize,
    closed: bool,
}

impl MemoryStream {
    pub fn new(messages: Vec<PublishMessage>) -> Self {
        MemoryStream {
            messages,
            offset: 0,
            closed: false,
        }
    }

    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self, VmpError> {
        let messages = dataset::read_jsonl(File::open(path).map_err(DatasetError::Io)?)?;
        Ok(MemoryStream::new(messages))
    }

    pub fn push(&mut self, msg: PublishMessage) {
        self.messages.push(msg);
    }

    /// Further fetches fail with [`VmpError::StreamClosed`].
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn remaining(&self) -> usize {
        self.messages.len() - self.offset
    }
}

impl MessageStream for MemoryStream {
    fn fetch(&mut self, max: usize) -> Result<Vec<PublishMessage>, VmpError> {
        if self.closed {
            return Err(VmpError::StreamClosed);
        }
        let end = (self.offset + max).min(self.messages.len());
        let batch = self.messages[self.offset..end].to_vec();
        self.offset = end;
        Ok(batch)
    }

    fn offset(&self) -> u64 {
        self.offset as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceBatch {
    pub messages: Vec<PublishMessage>,
    pub start_offset: u64,
    pub end_offset: u64,
}

/// Polls one batch. Duplicate ids within the batch collapse to one message
/// at the first occurrence's position carrying the latest payload; the
/// offset still advances past every raw message.
pub fn source_poll(
    stream: &mut dyn MessageStream,
    batch_size: usize,
) -> Result<SourceBatch, VmpError> {
    if batch_size == 0 {
        return Err(VmpError::InvalidBatchSize);
    }
    let start_offset = stream.offset();
    let raw = stream.fetch(batch_size)?;
    let mut position: HashMap<String, usize> = HashMap::new();
    let mut messages: Vec<PublishMessage> = Vec::with_capacity(raw.len());
    for msg in raw {
        match position.get(&msg.video_id) {
            Some(&i) => messages[i] = msg,
            None => {
                position.insert(msg.video_id.clone(), messages.len());
                messages.push(msg);
            }
        }
    }
    Ok(SourceBatch {
        messages,
        start_offset,
        end_offset: stream.offset(),
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("feature fetch for `{video_id}` failed: {reason}")]
pub struct FetchError {
    pub video_id: String,
    pub reason: String,
}

/// Resolves a video id to its metadata and features.
pub trait FeatureClient: Send + Sync {
    fn fetch(&self, video_id: &str) -> Result<VideoItem, FetchError>;
}

/// Serves items from a fixed table.
#[derive(Debug, Clone, Default)]
pub struct TableFeatureClient {
    items: HashMap<String, VideoItem>,
}

impl TableFeatureClient {
    pub fn new(items: impl IntoIterator<Item = VideoItem>) -> Self {
        TableFeatureClient {
            items: items.into_iter().map(|i| (i.id.clone(), i)).collect(),
        }
    }

    pub fn from_examples(examples: &[LabeledExample]) -> Self {
        TableFeatureClient::new(examples.iter().map(|e| e.item().clone()))
    }
}

impl FeatureClient for TableFeatureClient {
    fn fetch(&self, video_id: &str) -> Result<VideoItem, FetchError> {
        self.items.get(video_id).cloned().ok_or_else(|| FetchError {
            video_id: video_id.to_string(),
            reason: "unknown id".into(),
        })
    }
}

/// Value stored in the index for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordValue {
    pub stage_used: Stage,
    pub gate_action: GateAction,
    pub gate_score: f64,
    pub final_probs: ProbVector,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stage2_fallback: bool,
    pub cost_units: f64,
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_digest: Option<String>,
    pub event_time: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub key: String,
    pub value: RecordValue,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrieveError {
    #[error(transparent)]
    FeatureFetchFailed(#[from] FetchError),
    #[error("scoring `{video_id}` failed: {cause}")]
    Scoring { video_id: String, cause: CascadeError },
}

/// Fetches features for a message and scores the item through the cascade.
/// Message payload fields override fetched metadata.
pub fn retrieve(
    msg: &PublishMessage,
    cascade: &Cascade,
    client: &dyn FeatureClient,
) -> Result<IndexRecord, RetrieveError> {
    let mut item = client.fetch(&msg.video_id)?;
    item.id = msg.video_id.clone();
    item.metadata
        .extend(msg.payload.iter().map(|(k, v)| (k.clone(), *v)));
    let result = cascade
        .classify(&item)
        .map_err(|cause| RetrieveError::Scoring {
            video_id: msg.video_id.clone(),
            cause,
        })?;
    let feature_digest = item.features.as_ref().map(|f| {
        let bytes = serde_json::to_vec(f).expect("feature bundle serializes");
        hex::encode(Sha256::digest(bytes))
    });
    Ok(IndexRecord {
        key: msg.video_id.clone(),
        value: RecordValue {
            stage_used: result.stage_used,
            gate_action: result.gate.action,
            gate_score: result.gate.score,
            final_probs: result.final_probs,
            stage2_fallback: result.stage2_fallback,
            cost_units: result.cost_units,
            metadata: item.metadata,
            feature_digest,
            event_time: msg.event_time,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    Remained,
    Removed,
    Ignored,
}

/// A numeric field of an index record that filter clauses test.
///
/// Written as `positive_score` (same as `final_probs[1]`), `final_probs[i]`,
/// `gate_score`, `cost_units` or `metadata.<key>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RecordField {
    FinalProb(usize),
    GateScore,
    CostUnits,
    Metadata(String),
}

impl RecordField {
    fn read(&self, value: &RecordValue) -> Option<f64> {
        match self {
            RecordField::FinalProb(i) => value.final_probs.get(*i),
            RecordField::GateScore => Some(value.gate_score),
            RecordField::CostUnits => Some(value.cost_units),
            RecordField::Metadata(key) => value.metadata.get(key).copied(),
        }
    }
}

impl TryFrom<String> for RecordField {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == "positive_score" {
            return Ok(RecordField::FinalProb(1));
        }
        if s == "gate_score" {
            return Ok(RecordField::GateScore);
        }
        if s == "cost_units" {
            return Ok(RecordField::CostUnits);
        }
        if let Some(key) = s.strip_prefix("metadata.") {
            if !key.is_empty() {
                return Ok(RecordField::Metadata(key.to_string()));
            }
        }
        if let Some(idx) = s
            .strip_prefix("final_probs[")
            .and_then(|rest| rest.strip_suffix(']'))
        {
            return idx
                .parse()
                .map(RecordField::FinalProb)
                .map_err(|_| format!("bad class index in `{s}`"));
        }
        Err(format!("unknown record field `{s}`"))
    }
}

impl From<RecordField> for String {
    fn from(f: RecordField) -> Self {
        match f {
            RecordField::FinalProb(i) => format!("final_probs[{i}]"),
            RecordField::GateScore => "gate_score".into(),
            RecordField::CostUnits => "cost_units".into(),
            RecordField::Metadata(key) => format!("metadata.{key}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    Ge,
    Gt,
    Le,
    Lt,
    Eq,
}

impl Comparison {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparison::Ge => lhs >= rhs,
            Comparison::Gt => lhs > rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Lt => lhs < rhs,
            Comparison::Eq => lhs == rhs,
        }
    }
}

/// `field op value -> disposition`. A field missing from the record never
/// matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterClause {
    pub name: String,
    pub field: RecordField,
    pub op: Comparison,
    pub value: f64,
    pub disposition: Disposition,
}

impl FilterClause {
    pub fn new(
        name: impl Into<String>,
        field: RecordField,
        op: Comparison,
        value: f64,
        disposition: Disposition,
    ) -> Self {
        FilterClause {
            name: name.into(),
            field,
            op,
            value,
            disposition,
        }
    }

    fn matches(&self, value: &RecordValue) -> bool {
        self.field
            .read(value)
            .is_some_and(|v| self.op.holds(v, self.value))
    }
}

/// Ordered clauses, first match wins, with a mandatory default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRule {
    #[serde(default)]
    pub rules: Vec<FilterClause>,
    pub default: Disposition,
}

impl FilterRule {
    pub fn new(rules: Vec<FilterClause>, default: Disposition) -> Self {
        FilterRule { rules, default }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub disposition: Disposition,
    pub reason: String,
}

pub fn filter_stage(record: &IndexRecord, rules: &FilterRule) -> FilterOutcome {
    match rules.rules.iter().find(|c| c.matches(&record.value)) {
        Some(clause) => FilterOutcome {
            disposition: clause.disposition,
            reason: clause.name.clone(),
        },
        None => FilterOutcome {
            disposition: rules.default,
            reason: "default".into(),
        },
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index unavailable: {0}")]
    Unavailable(String),
    #[error("index log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

/// Key-value store of index records. Mutations are applied one at a time.
pub trait IndexStore: Send {
    fn upsert(&mut self, record: &IndexRecord) -> Result<(), IndexError>;

    /// Returns whether the key was present.
    fn delete(&mut self, key: &str) -> Result<bool, IndexError>;

    fn get(&self, key: &str) -> Option<RecordValue>;

    fn snapshot(&self) -> BTreeMap<String, RecordValue>;

    fn len(&self) -> usize {
        self.snapshot().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum LogEntry {
    Upsert { key: String, value: RecordValue },
    Delete { key: String },
}

/// In-memory index with an optional append-only JSONL mutation log that is
/// replayed on open.
#[derive(Debug, Default)]
pub struct MemoryIndex {
    map: BTreeMap<String, RecordValue>,
    log: Option<BufWriter<File>>,
}

impl MemoryIndex {
    pub fn new() -> Self {
        MemoryIndex::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let mut map = BTreeMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| IndexError::Unavailable(e.to_string()))?;
            let entries: Vec<LogEntry> = dataset::read_jsonl(file).map_err(|e| match e {
                DatasetError::Parse { line, source } => IndexError::CorruptLog {
                    line,
                    reason: source.to_string(),
                },
                other => IndexError::Unavailable(other.to_string()),
            })?;
            for entry in entries {
                match entry {
                    LogEntry::Upsert { key, value } => {
                        map.insert(key, value);
                    }
                    LogEntry::Delete { key } => {
                        map.remove(&key);
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| IndexError::Unavailable(e.to_string()))?;
        Ok(MemoryIndex {
            map,
            log: Some(BufWriter::new(file)),
        })
    }

    fn append(&mut self, entry: &LogEntry) -> Result<(), IndexError> {
        if let Some(log) = &mut self.log {
            let unavailable = |e: std::io::Error| IndexError::Unavailable(e.to_string());
            serde_json::to_writer(&mut *log, entry)
                .map_err(|e| IndexError::Unavailable(e.to_string()))?;
            log.write_all(b"\n").map_err(unavailable)?;
            log.flush().map_err(unavailable)?;
        }
        Ok(())
    }
}

impl IndexStore for MemoryIndex {
    fn upsert(&mut self, record: &IndexRecord) -> Result<(), IndexError> {
        self.append(&LogEntry::Upsert {
            key: record.key.clone(),
            value: record.value.clone(),
        })?;
        self.map.insert(record.key.clone(), record.value.clone());
        Ok(())
    }

    fn delete(&mut self, key: &str) -> Result<bool, IndexError> {
        if !self.map.contains_key(key) {
            return Ok(false);
        }
        self.append(&LogEntry::Delete {
            key: key.to_string(),
        })?;
        self.map.remove(key);
        Ok(true)
    }

    fn get(&self, key: &str) -> Option<RecordValue> {
        self.map.get(key).cloned()
    }

    fn snapshot(&self) -> BTreeMap<String, RecordValue> {
        self.map.clone()
    }

    fn len(&self) -> usize {
        self.map.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles on each further attempt.
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub key: String,
    pub disposition: Disposition,
    pub reason: String,
    /// Index mutation performed, if any: `upsert` or `delete`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
}

#[derive(Debug, Error)]
#[error("index unavailable for `{key}` after {attempts} attempts: {last}")]
pub struct SinkError {
    pub key: String,
    pub attempts: u32,
    pub last: String,
}

/// Applies filter outcomes to the index and keeps an audit trail.
pub struct Sink {
    index: Box<dyn IndexStore>,
    audit: Vec<AuditEntry>,
    audit_log: Option<BufWriter<File>>,
    retry: RetryPolicy,
}

impl Sink {
    pub fn new(index: Box<dyn IndexStore>) -> Self {
        Sink {
            index,
            audit: Vec::new(),
            audit_log: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Also appends audit entries as JSONL to `path`.
    pub fn with_audit_log(mut self, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.audit_log = Some(BufWriter::new(file));
        Ok(self)
    }

    pub fn index(&self) -> &dyn IndexStore {
        self.index.as_ref()
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn into_index(self) -> Box<dyn IndexStore> {
        self.index
    }

    /// Remained upserts, Removed deletes, Ignored leaves the index alone.
    /// Every applied outcome appends one audit entry.
    pub fn apply(&mut self, outcome: &FilterOutcome, record: &IndexRecord) -> Result<(), SinkError> {
        let op = match outcome.disposition {
            Disposition::Remained => {
                self.with_retries(&record.key, |index| index.upsert(record))?;
                Some("upsert".to_string())
            }
            Disposition::Removed => {
                let existed = self.with_retries(&record.key, |index| index.delete(&record.key))?;
                existed.then(|| "delete".to_string())
            }
            Disposition::Ignored => None,
        };
        let entry = AuditEntry {
            key: record.key.clone(),
            disposition: outcome.disposition,
            reason: outcome.reason.clone(),
            op,
        };
        if let Some(log) = &mut self.audit_log {
            // The audit file is best effort; the in-memory trail is authoritative.
            let _ = serde_json::to_writer(&mut *log, &entry)
                .map_err(std::io::Error::from)
                .and_then(|_| log.write_all(b"\n"))
                .and_then(|_| log.flush());
        }
        self.audit.push(entry);
        Ok(())
    }

    fn with_retries<T>(
        &mut self,
        key: &str,
        mut op: impl FnMut(&mut dyn IndexStore) -> Result<T, IndexError>,
    ) -> Result<T, SinkError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut backoff = self.retry.base_backoff_ms;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match op(self.index.as_mut()) {
                Ok(v) => return Ok(v),
                Err(e) => last = e.to_string(),
            }
            if attempt < attempts {
                thread::sleep(Duration::from_millis(backoff));
                backoff = backoff.saturating_mul(2);
            }
        }
        Err(SinkError {
            key: key.to_string(),
            attempts,
            last,
        })
    }
}

/// Free-function form of [`Sink::apply`].
pub fn sink_apply(outcome: &FilterOutcome, record: &IndexRecord, sink: &mut Sink) -> Result<(), SinkError> {
    sink.apply(outcome, record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineStage {
    Retriever,
    Sink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub video_id: String,
    pub stage: PipelineStage,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub processed: usize,
    pub remained: usize,
    pub removed: usize,
    pub ignored: usize,
    pub dead_lettered: usize,
    pub batches: usize,
    pub committed_offset: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dead_letters: Vec<DeadLetter>,
}

/// Where stage clients come from. Paths are resolved by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientSpec {
    /// Scores recorded in a labeled dataset (`stage1` or `stage2` column,
    /// chosen by the slot the client fills).
    Recorded {
        dataset: PathBuf,
        #[serde(default = "one")]
        cost_units: f64,
    },
    /// Trained fusion model parameters; items must carry features.
    Fusion {
        params: PathBuf,
        #[serde(default = "one")]
        cost_units: f64,
    },
    Fixed {
        probs: ProbVector,
        #[serde(default = "one")]
        cost_units: f64,
    },
    /// A remote scoring endpoint.
    Http {
        url: String,
        #[serde(default = "one")]
        cost_units: f64,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_timeout_ms() -> u64 {
    2000
}

/// Where item metadata and features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// Items (metadata and optional features) from a labeled dataset.
    Dataset { dataset: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientsConfig {
    pub stage1: ClientSpec,
    pub stage2: ClientSpec,
    pub features: FeatureSpec,
}

/// Pipeline configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub gate_policy: GatePolicy,
    pub filter_rules: FilterRule,
    pub clients: ClientsConfig,
    /// Stop after this many batches; `None` drains the stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batches: Option<usize>,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VmpError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| VmpError::Config(format!("{}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| VmpError::Config(e.to_string()))?;
        if let Some(dir) = path.parent() {
            config.clients.resolve_paths(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), VmpError> {
        if self.batch_size == 0 {
            return Err(VmpError::InvalidBatchSize);
        }
        self.gate_policy
            .validate()
            .map_err(|e| VmpError::Config(e.to_string()))
    }
}

impl ClientsConfig {
    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for spec in [&mut self.stage1, &mut self.stage2] {
            match spec {
                ClientSpec::Recorded { dataset, .. } => fix(dataset),
                ClientSpec::Fusion { params, .. } => fix(params),
                _ => {}
            }
        }
        let FeatureSpec::Dataset { dataset } = &mut self.features;
        fix(dataset);
    }
}

/// Builds a local stage client. `Http` specs are not handled here and
/// yield a config error.
pub fn build_local_classifier(spec: &ClientSpec, stage: Stage) -> Result<Arc<dyn Classifier>, VmpError> {
    let config_err = |e: String| VmpError::Config(e);
    Ok(match spec {
        ClientSpec::Recorded {
            dataset,
            cost_units,
        } => {
            let examples = dataset::load_examples(dataset)
                .map_err(|e| config_err(format!("{}: {e}", dataset.display())))?;
            match stage {
                Stage::Stage1 => Arc::new(RecordedClassifier::stage1_from(&examples, *cost_units)),
                Stage::Stage2 => Arc::new(RecordedClassifier::stage2_from(&examples, *cost_units)),
            }
        }
        ClientSpec::Fusion { params, cost_units } => {
            let text = std::fs::read_to_string(params)
                .map_err(|e| config_err(format!("{}: {e}", params.display())))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
            let params = FusionParams::from_json(&value).map_err(|e| config_err(e.to_string()))?;
            let id = format!("fusion-{stage}");
            Arc::new(FusionClassifier::new(id, *cost_units, params).map_err(|e| config_err(e.to_string()))?)
        }
        ClientSpec::Fixed { probs, cost_units } => {
            Arc::new(FixedClassifier::new(format!("fixed-{stage}"), *cost_units, probs.clone()))
        }
        ClientSpec::Http { url, .. } => {
            return Err(config_err(format!("http client `{url}` needs a remote-capable builder")))
        }
    })
}

pub fn build_feature_client(spec: &FeatureSpec) -> Result<Arc<dyn FeatureClient>, VmpError> {
    match spec {
        FeatureSpec::Dataset { dataset } => {
            let examples = dataset::load_examples(dataset)
                .map_err(|e| VmpError::Config(format!("{}: {e}", dataset.display())))?;
            Ok(Arc::new(TableFeatureClient::from_examples(&examples)))
        }
    }
}

/// Everything a run needs besides the stream.
pub struct Pipeline<'a> {
    pub batch_size: usize,
    pub max_batches: Option<usize>,
    pub cascade: Cascade,
    pub features: Arc<dyn FeatureClient>,
    pub filter: FilterRule,
    pub sink: &'a mut Sink,
}

struct Retrieved {
    records: Vec<IndexRecord>,
    dead: Vec<DeadLetter>,
    polled: usize,
}

/// Drains `stream` in mini-batches through all four stages.
pub fn run_pipeline(stream: &mut dyn MessageStream, pipeline: Pipeline<'_>) -> Result<PipelineReport, VmpError> {
    if pipeline.batch_size == 0 {
        return Err(VmpError::InvalidBatchSize);
    }
    pipeline
        .cascade
        .policy
        .validate()
        .map_err(|e| VmpError::Config(e.to_string()))?;
    let Pipeline {
        batch_size,
        max_batches,
        cascade,
        features,
        filter,
        sink,
    } = pipeline;

    let (batch_tx, batch_rx) = sync_channel::<SourceBatch>(1);
    let (record_tx, record_rx) = sync_channel::<Retrieved>(1);
    let (outcome_tx, outcome_rx) = sync_channel::<(Vec<(IndexRecord, FilterOutcome)>, Vec<DeadLetter>, usize)>(1);

    thread::scope(|scope| {
        let source = scope.spawn(move || -> Result<(usize, u64), VmpError> {
            let mut batches = 0usize;
            loop {
                if max_batches.is_some_and(|m| batches >= m) {
                    break;
                }
                let batch = source_poll(stream, batch_size)?;
                if batch.end_offset == batch.start_offset {
                    break;
                }
                batches += 1;
                if batch_tx.send(batch).is_err() {
                    return Err(VmpError::StageStopped("retriever"));
                }
            }
            Ok((batches, stream.offset()))
        });

        let cascade = &cascade;
        let features = features.as_ref();
        scope.spawn(move || {
            for batch in batch_rx {
                let polled = batch.messages.len();
                let mut records = Vec::with_capacity(polled);
                let mut dead = Vec::new();
                for msg in &batch.messages {
                    match retrieve(msg, cascade, features) {
                        Ok(r) => records.push(r),
                        Err(e) => dead.push(DeadLetter {
                            video_id: msg.video_id.clone(),
                            stage: PipelineStage::Retriever,
                            reason: e.to_string(),
                        }),
                    }
                }
                if record_tx.send(Retrieved { records, dead, polled }).is_err() {
                    break;
                }
            }
        });

        let filter = &filter;
        scope.spawn(move || {
            for retrieved in record_rx {
                let decided = retrieved
                    .records
                    .into_iter()
                    .map(|r| {
                        let outcome = filter_stage(&r, filter);
                        (r, outcome)
                    })
                    .collect();
                if outcome_tx.send((decided, retrieved.dead, retrieved.polled)).is_err() {
                    break;
                }
            }
        });

        let mut report = PipelineReport::default();
        for (decided, dead, polled) in outcome_rx {
            report.processed += polled;
            report.dead_letters.extend(dead);
            for (record, outcome) in decided {
                match sink.apply(&outcome, &record) {
                    Ok(()) => match outcome.disposition {
                        Disposition::Remained => report.remained += 1,
                        Disposition::Removed => report.removed += 1,
                        Disposition::Ignored => report.ignored += 1,
                    },
                    Err(e) => report.dead_letters.push(DeadLetter {
                        video_id: record.key.clone(),
                        stage: PipelineStage::Sink,
                        reason: e.to_string(),
                    }),
                }
            }
        }
        let (batches, offset) = source
            .join()
            .map_err(|_| VmpError::StageStopped("source"))??;
        report.batches = batches;
        report.committed_offset = offset;
        report.dead_lettered = report.dead_letters.len();
        Ok(report)
    })
}
