//! Remote stage clients: a blocking HTTP classifier and the matching
//! model-server router.
//!
//! Wire format: `POST <url>` with `{"video_id", "metadata", "features"?}`,
//! answered by `{"probs": [...]}`.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use gatecascade_core::cascade::{Classifier, ClassifierError};
use gatecascade_core::toyfusion::FeatureBundle;
use gatecascade_core::types::{Metadata, ModelOutput, ProbVector, VideoItem};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRequest {
    pub video_id: String,
    #[serde(default)]
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureBundle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelResponse {
    pub probs: Vec<f64>,
}

/// Calls a remote model server for every item.
pub struct HttpClassifier {
    model_id: String,
    url: String,
    cost_units: f64,
    agent: ureq::Agent,
}

impl HttpClassifier {
    pub fn new(url: impl Into<String>, cost_units: f64, timeout: Duration) -> Self {
        let url = url.into();
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpClassifier {
            model_id: format!("http:{url}"),
            url,
            cost_units,
            agent: config.into(),
        }
    }
}

impl Classifier for HttpClassifier {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn cost_units(&self) -> f64 {
        self.cost_units
    }

    fn score(&self, item: &VideoItem) -> Result<ModelOutput, ClassifierError> {
        let err = |m: String| ClassifierError::new(&self.model_id, m);
        let request = ModelRequest {
            video_id: item.id.clone(),
            metadata: item.metadata.clone(),
            features: item.features.clone(),
        };
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(&request)
            .map_err(|e| err(e.to_string()))?;
        if !response.status().is_success() {
            return Err(err(format!("status {}", response.status())));
        }
        let body: ModelResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| err(e.to_string()))?;
        let probs = ProbVector::new(body.probs).map_err(|e| err(e.to_string()))?;
        ModelOutput::new(probs, &self.model_id, self.cost_units).map_err(|e| err(e.to_string()))
    }
}

/// Serves a local classifier over the remote wire format at `POST /predict`.
pub fn model_router(model: Arc<dyn Classifier>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .with_state(model)
}

async fn predict(
    State(model): State<Arc<dyn Classifier>>,
    Json(req): Json<ModelRequest>,
) -> Result<Json<ModelResponse>, (StatusCode, String)> {
    let item = VideoItem {
        id: req.video_id,
        metadata: req.metadata,
        features: req.features,
    };
    let out = tokio::task::spawn_blocking(move || model.score(&item))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| (StatusCode::BAD_GATEWAY, e.to_string()))?;
    Ok(Json(ModelResponse {
        probs: out.probs.into(),
    }))
}
