use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("sample has {got} dimensions, space expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no latency entry for layer {layer}, block '{block}', device '{device}'")]
    MissingLatency {
        layer: i32,
        block: String,
        device: String,
    },

    #[error("unknown device '{0}'")]
    UnknownDevice(String),

    #[error("power estimation failed: {0}")]
    PowerEstimation(String),

    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("parse error in {name}, line {line}: {message}")]
    Parse {
        name: String,
        line: usize,
        message: String,
    },

    #[error("space cardinality {cardinality} exceeds enumeration cap {cap}")]
    SpaceTooLarge { cardinality: String, cap: u64 },

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing run artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Exit-code class for the CLI: validation errors (bad input that was
    /// rejected before doing work) versus runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpace(_)
                | Error::InvalidConfig { .. }
                | Error::Parse { .. }
                | Error::SpaceTooLarge { .. }
                | Error::UnknownDevice(_)
                | Error::PowerEstimation(_)
        )
    }
}
