use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("render error: {0}")]
    Render(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
