//! Scoring gateway state and HTTP handlers.
//!
//! The gate policy lives behind an `RwLock<Arc<GatePolicy>>`. A request
//! clones the `Arc` once before gating and uses that snapshot throughout,
//! so it observes either the policy before a swap or the one after it,
//! never a mix. Counters and the request log share one mutex so a stats
//! snapshot always agrees with the log.

use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use gatecascade_core::cascade::{classify, CascadeError, Classifier};
use gatecascade_core::gate::{decide, GatePolicy};
use gatecascade_core::toyfusion::FeatureBundle;
use gatecascade_core::types::{Metadata, ProbVector, Stage, VideoItem};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureBundle>,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub final_probs: ProbVector,
    pub stage_used: Stage,
    pub gate_score: f64,
    pub cost_units: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub total: u64,
    pub forwarded: u64,
    pub qps_ratio_pct: f64,
    pub stage1_cost_units: f64,
    pub stage2_cost_units: f64,
}

/// One successfully answered `/score` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub seq: u64,
    pub video_id: String,
    pub stage_used: Stage,
    pub forwarded: bool,
    pub gate_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyChange {
    pub seq: u64,
    pub previous: GatePolicy,
    pub current: GatePolicy,
}

#[derive(Default)]
struct Ledger {
    stats: GatewayStats,
    log: Vec<RequestLogEntry>,
}

/// Shared gateway state.
pub struct Gateway {
    policy: RwLock<Arc<GatePolicy>>,
    stage1: Option<Arc<dyn Classifier>>,
    stage2: Arc<dyn Classifier>,
    replay_stage1_cost: f64,
    ledger: Mutex<Ledger>,
    policy_changes: Mutex<Vec<PolicyChange>>,
}

impl Gateway {
    /// `stage1` is only needed for requests that carry features.
    pub fn new(
        policy: GatePolicy,
        stage1: Option<Arc<dyn Classifier>>,
        stage2: Arc<dyn Classifier>,
    ) -> Self {
        let replay_stage1_cost = stage1.as_ref().map_or(1.0, |s| s.cost_units());
        Gateway {
            policy: RwLock::new(Arc::new(policy)),
            stage1,
            stage2,
            replay_stage1_cost,
            ledger: Mutex::new(Ledger::default()),
            policy_changes: Mutex::new(Vec::new()),
        }
    }

    /// Cost charged for a stage-1 score supplied in the request.
    pub fn with_replay_stage1_cost(mut self, cost: f64) -> Self {
        self.replay_stage1_cost = cost;
        self
    }

    pub fn policy(&self) -> Arc<GatePolicy> {
        self.policy.read().expect("policy lock").clone()
    }

    pub fn set_policy(&self, policy: GatePolicy) -> GatePolicy {
        let mut guard = self.policy.write().expect("policy lock");
        let previous = std::mem::replace(&mut *guard, Arc::new(policy.clone()));
        let mut changes = self.policy_changes.lock().expect("audit lock");
        let seq = changes.len() as u64 + 1;
        changes.push(PolicyChange {
            seq,
            previous: (*previous).clone(),
            current: policy.clone(),
        });
        policy
    }

    pub fn stats(&self) -> GatewayStats {
        self.ledger.lock().expect("ledger lock").stats.clone()
    }

    pub fn request_log(&self) -> Vec<RequestLogEntry> {
        self.ledger.lock().expect("ledger lock").log.clone()
    }

    pub fn policy_changes(&self) -> Vec<PolicyChange> {
        self.policy_changes.lock().expect("audit lock").clone()
    }

    fn record(&self, video_id: &str, response: &ScoreResponse, stage1_cost: f64, forwarded: bool) {
        let mut ledger = self.ledger.lock().expect("ledger lock");
        let stats = &mut ledger.stats;
        stats.total += 1;
        stats.stage1_cost_units += stage1_cost;
        if forwarded {
            stats.forwarded += 1;
            stats.stage2_cost_units += response.cost_units - stage1_cost;
        }
        stats.qps_ratio_pct = 100.0 * stats.forwarded as f64 / stats.total as f64;
        let seq = stats.total;
        ledger.log.push(RequestLogEntry {
            seq,
            video_id: video_id.to_string(),
            stage_used: response.stage_used,
            forwarded,
            gate_score: response.gate_score,
        });
    }
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/config/gate", put(put_gate).get(get_gate))
        .route("/stats", get(stats))
        .with_state(gateway)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

// Early rejection; boxed to keep results small.
type Reject = Box<Response>;

fn reject(status: StatusCode, message: impl Into<String>) -> Reject {
    Box::new(error(status, message))
}

enum Outcome {
    Ok {
        response: ScoreResponse,
        stage1_cost: f64,
        forwarded: bool,
    },
    Fallback {
        response: ScoreResponse,
        cause: String,
    },
}

async fn score(State(gw): State<Arc<Gateway>>, body: Bytes) -> Response {
    let req: ScoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    if req.video_id.is_empty() {
        return error(StatusCode::BAD_REQUEST, "video_id is empty");
    }
    let policy = gw.policy();
    let outcome = match (req.stage1_probs, req.features) {
        (Some(raw), None) => {
            let probs = match ProbVector::new(raw) {
                Ok(p) => p,
                Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            };
            let item = VideoItem {
                id: req.video_id.clone(),
                metadata: req.metadata,
                features: None,
            };
            let gw2 = gw.clone();
            run_blocking(move || replay(&gw2, &policy, item, probs)).await
        }
        (None, Some(features)) => {
            let Some(stage1) = gw.stage1.clone() else {
                return error(StatusCode::BAD_REQUEST, "live scoring is not configured");
            };
            let item = VideoItem {
                id: req.video_id.clone(),
                metadata: req.metadata,
                features: Some(features),
            };
            let stage2 = gw.stage2.clone();
            run_blocking(move || live(stage1.as_ref(), &policy, stage2.as_ref(), item)).await
        }
        _ => {
            return error(
                StatusCode::BAD_REQUEST,
                "exactly one of stage1_probs and features is required",
            )
        }
    };
    match outcome {
        Err(resp) => *resp,
        Ok(Outcome::Ok {
            response,
            stage1_cost,
            forwarded,
        }) => {
            gw.record(&req.video_id, &response, stage1_cost, forwarded);
            (StatusCode::OK, Json(response)).into_response()
        }
        Ok(Outcome::Fallback { response, cause }) => {
            let mut body = serde_json::to_value(&response).expect("response serializes");
            body["stage2_fallback"] = json!(true);
            body["error"] = json!(cause);
            (StatusCode::BAD_GATEWAY, Json(body)).into_response()
        }
    }
}

async fn run_blocking<F>(f: F) -> Result<Outcome, Reject>
where
    F: FnOnce() -> Result<Outcome, Reject> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())))
}

fn replay(gw: &Gateway, policy: &GatePolicy, item: VideoItem, probs: ProbVector) -> Result<Outcome, Reject> {
    let gate = decide(policy, &probs, &item.metadata)
        .map_err(|e| reject(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let stage1_cost = gw.replay_stage1_cost;
    if !gate.is_forward() {
        return Ok(Outcome::Ok {
            response: ScoreResponse {
                final_probs: probs,
                stage_used: Stage::Stage1,
                gate_score: gate.score,
                cost_units: stage1_cost,
            },
            stage1_cost,
            forwarded: false,
        });
    }
    let cost = stage1_cost + gw.stage2.cost_units();
    let second = gw.stage2.score(&item).and_then(|out| {
        if out.probs.num_classes() == probs.num_classes() {
            Ok(out)
        } else {
            Err(gatecascade_core::ClassifierError::new(
                gw.stage2.model_id(),
                "class count differs from stage 1",
            ))
        }
    });
    Ok(match second {
        Ok(out) => Outcome::Ok {
            response: ScoreResponse {
                final_probs: out.probs,
                stage_used: Stage::Stage2,
                gate_score: gate.score,
                cost_units: stage1_cost + out.cost_units,
            },
            stage1_cost,
            forwarded: true,
        },
        Err(e) => Outcome::Fallback {
            response: ScoreResponse {
                final_probs: probs,
                stage_used: Stage::Stage1,
                gate_score: gate.score,
                cost_units: cost,
            },
            cause: e.to_string(),
        },
    })
}

fn live(
    stage1: &dyn Classifier,
    policy: &GatePolicy,
    stage2: &dyn Classifier,
    item: VideoItem,
) -> Result<Outcome, Reject> {
    let result = classify(&item, stage1, policy, stage2).map_err(|e| match e {
        CascadeError::StageFailure { .. } => reject(StatusCode::BAD_GATEWAY, e.to_string()),
        other => reject(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    })?;
    let response = ScoreResponse {
        final_probs: result.final_probs,
        stage_used: result.stage_used,
        gate_score: result.gate.score,
        cost_units: result.cost_units,
    };
    if result.stage2_fallback {
        return Ok(Outcome::Fallback {
            response,
            cause: format!("{} failed", stage2.model_id()),
        });
    }
    Ok(Outcome::Ok {
        forwarded: result.gate.is_forward(),
        stage1_cost: stage1.cost_units(),
        response,
    })
}

async fn put_gate(State(gw): State<Arc<Gateway>>, body: Bytes) -> Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    match GatePolicy::from_json(text) {
        Ok(policy) => {
            let policy = gw.set_policy(policy);
            (StatusCode::OK, Json(json!({ "status": "ok", "policy": policy }))).into_response()
        }
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn get_gate(State(gw): State<Arc<Gateway>>) -> Json<GatePolicy> {
    Json((*gw.policy()).clone())
}

async fn stats(State(gw): State<Arc<Gateway>>) -> Json<GatewayStats> {
    Json(gw.stats())
}

/// Recomputes `(total, forwarded, qps_ratio_pct)` from a request log.
pub fn recount(log: &[RequestLogEntry]) -> (u64, u64, f64) {
    let total = log.len() as u64;
    let forwarded = log.iter().filter(|e| e.forwarded).count() as u64;
    let pct = if total == 0 {
        0.0
    } else {
        100.0 * forwarded as f64 / total as f64
    };
    (total, forwarded, pct)
}
