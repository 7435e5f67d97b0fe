use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (limit {limit}) for {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("non-finite input to {0}")]
    NumericInput(&'static str),

    #[error("freeze violation: {0}")]
    FreezeViolation(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    TrainingDivergence { iteration: usize, loss: f64 },

    #[error("sampling diverged at step {step}")]
    SamplingDivergence { step: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown context `{0}`")]
    UnknownContext(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed csv at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for the two divergence variants; callers map these to a dedicated exit status.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::TrainingDivergence { .. } | Error::SamplingDivergence { .. }
        )
    }
}
