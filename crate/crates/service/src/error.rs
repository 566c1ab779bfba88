use feedloop_core::classify::ClassifyError;
use feedloop_core::drift::DriftError;
use feedloop_core::feedback::FeedbackError;
use feedloop_core::goldset::GoldError;
use feedloop_core::ingest::IngestError;
use feedloop_core::lifecycle::LifecycleError;
use feedloop_core::MessageKey;
use thiserror::Error;

use crate::log::LogError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Gold(#[from] GoldError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("unknown message {0}")]
    UnknownMessage(MessageKey),
    #[error("message {key} has no classification from {version}")]
    NotClassified { key: MessageKey, version: String },
    #[error("implicit tracking is disabled for this deployment")]
    ImplicitTrackingDisabled,
    #[error("no deployed FT model to measure drift against")]
    NoReference,
    #[error("no dataset snapshot has been taken yet")]
    NoSnapshot,
    #[error("TEST split is only read when a version is deployed")]
    TestSplitReserved,
    #[error("record {seq} does not apply: {reason}")]
    SchemaViolation { seq: u64, reason: String },
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

/// Name of the enum variant in a Debug rendering (`Foo(..)`, `Foo { .. }`,
/// `Foo`).
fn variant(debug: &str) -> String {
    debug.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or_default().to_string()
}

impl ServiceError {
    /// Stable machine-readable error name for API bodies.
    pub fn code(&self) -> String {
        match self {
            ServiceError::Ingest(e) => variant(&format!("{e:?}")),
            ServiceError::Feedback(e) => variant(&format!("{e:?}")),
            ServiceError::Gold(e) => variant(&format!("{e:?}")),
            ServiceError::Lifecycle(LifecycleError::Classify(e)) | ServiceError::Classify(e) => {
                variant(&format!("{e:?}"))
            }
            ServiceError::Lifecycle(e) => variant(&format!("{e:?}")),
            ServiceError::Drift(e) => variant(&format!("{e:?}")),
            ServiceError::Log(LogError::Io { .. }) => "StorageFailure".into(),
            ServiceError::Log(e) => variant(&format!("{e:?}")),
            other => variant(&format!("{other:?}")),
        }
    }
}
