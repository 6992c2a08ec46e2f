use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel {index}: {reason}")]
    InvalidKernel { index: usize, reason: String },

    #[error("invalid kernel: covariance is not symmetric positive definite")]
    NotSpd,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("provider produced invalid output at level {level}, node {node}: {reason}")]
    ProviderOutput {
        level: usize,
        node: usize,
        reason: String,
    },

    #[error("step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("malformed record {record}: {reason}")]
    MalformedRecord { record: String, reason: String },

    #[error("covariance of kernel {index} is not symmetric positive definite")]
    NonSpd { index: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn at_step(self, step: u64) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }
}
