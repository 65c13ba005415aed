use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("field is not divergence-free: max relative divergence {max_divergence:e} exceeds {tolerance:e}")]
    NotSolenoidal { max_divergence: f64, tolerance: f64 },

    #[error("stability condition violated: {0}")]
    Stability(String),

    #[error("numerical blow-up at t = {time}: {reason}")]
    BlowUp { time: f64, reason: String },

    #[error("step failed at t = {time}: {source}")]
    StepFailed {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("missing noise coefficient log: {0}")]
    MissingNoiseLog(String),

    #[error("control outside budget: 1/2 |g|^2 = {cost} > {budget}")]
    OutsideBudget { cost: f64, budget: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
