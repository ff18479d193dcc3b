use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller broke an API contract (non-scalar root, repeated backward, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Caller-supplied data is out of range or malformed.
    #[error("input error: {0}")]
    Input(String),
    /// An object is in the wrong state for the requested operation.
    #[error("state error: {0}")]
    State(String),
    /// Stored codes or files are corrupt.
    #[error("corruption: {0}")]
    Corruption(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },
    /// An attack sample could not be prepared.
    #[error("sample error: {0}")]
    Sample(String),
    /// The external naturalness judge could not be reached or used.
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    /// A pipeline stage failed.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
