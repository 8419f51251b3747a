use std::io;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("prompt of {len} tokens exceeds max_seq {max_seq}")]
    Length { len: usize, max_seq: usize },

    #[error("template edit not applicable: {0}")]
    Edit(String),

    #[error("residual sum has zero RMS and eps is 0; final norm is singular")]
    SingularNorm,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("cosine similarity undefined: zero-norm embedding ({0})")]
    Similarity(String),

    #[error("correlation undefined: zero variance in {0}")]
    UndefinedCorrelation(&'static str),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
