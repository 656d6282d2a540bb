use thiserror::Error;

/// Errors raised by filtering, graph evaluation, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A recursion produced a non-finite sample; `index` is the first offending time step.
    #[error("filter diverged: non-finite output at t = {index}")]
    Divergence { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("training diverged after {retries} recoveries (last good loss {last_loss:e} at iteration {iteration})")]
    TrainingDiverged {
        retries: usize,
        iteration: usize,
        last_loss: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed data: {0}")]
    Format(String),
}

impl Error {
    /// True for failures of the numerics (as opposed to I/O or malformed input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFinite(_) | Error::TrainingDiverged { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
