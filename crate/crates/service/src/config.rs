use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use gatecascade_core::cascade::Classifier;
use gatecascade_core::gate::GatePolicy;
use gatecascade_core::types::Stage;
use gatecascade_core::vmp::{build_local_classifier, ClientSpec, VmpError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Gateway;
use crate::remote::HttpClassifier;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error(transparent)]
    Client(#[from] VmpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceClients {
    /// Live-mode stage 1; requests carrying features fail without it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<ClientSpec>,
    pub stage2: ClientSpec,
}

/// Gateway configuration. The `gate_policy` block has the same schema as
/// the pipeline config, and a pipeline config file is accepted as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub gate_policy: GatePolicy,
    pub clients: ServiceClients,
    /// Cost charged for a stage-1 score supplied in the request. Defaults to
    /// the live stage-1 client's cost, or 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_stage1_cost: Option<f64>,
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let read_err = |reason: String| ConfigError::Read {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let mut config: ServiceConfig =
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let specs = self.clients.stage1.iter_mut().chain(std::iter::once(&mut self.clients.stage2));
        for spec in specs {
            let path = match spec {
                ClientSpec::Recorded { dataset, .. } => dataset,
                ClientSpec::Fusion { params, .. } => params,
                _ => continue,
            };
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn build(&self) -> Result<Gateway, ConfigError> {
        let stage1 = self
            .clients
            .stage1
            .as_ref()
            .map(|s| build_classifier(s, Stage::Stage1))
            .transpose()?;
        let stage2 = build_classifier(&self.clients.stage2, Stage::Stage2)?;
        let mut gateway = Gateway::new(self.gate_policy.clone(), stage1, stage2);
        if let Some(cost) = self.replay_stage1_cost {
            gateway = gateway.with_replay_stage1_cost(cost);
        }
        Ok(gateway)
    }
}

/// Builds any stage client, including remote HTTP ones.
pub fn build_classifier(spec: &ClientSpec, stage: Stage) -> Result<Arc<dyn Classifier>, VmpError> {
    match spec {
        ClientSpec::Http {
            url,
            cost_units,
            timeout_ms,
        } => Ok(Arc::new(HttpClassifier::new(
            url.clone(),
            *cost_units,
            Duration::from_millis(*timeout_ms),
        ))),
        local => build_local_classifier(local, stage),
    }
}
