use gatecascade_core::cascade::CascadeError;
use gatecascade_core::dataset::DatasetError;
use gatecascade_core::metrics::MetricsError;
use gatecascade_core::synth::SynthError;
use gatecascade_core::vmp::VmpError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] VmpError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    /// Process exit code: 2 when the data has no positives, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Metrics(MetricsError::NoPositives) => 2,
            _ => 1,
        }
    }
}
