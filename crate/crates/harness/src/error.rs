use adunit_transport::TransportError;

use crate::messages::MessageError;
use crate::scene::SceneError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("transport failure: {0}")]
    Transport(#[from] TransportError),
    #[error("transport failure: {0}")]
    Timeout(String),
    #[error("failed to spawn stage: {0}")]
    Spawn(String),
    #[error("stage {stage} failed: {reason}")]
    Stage { stage: String, reason: String },
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Config(#[from] adunit_core::ConfigError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
