use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("singular channel: |h| = {0:e}")]
    SingularChannel(f64),

    #[error("malformed data at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error("frame error: {0}")]
    Frame(#[from] crate::link::frame::FrameError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op: op.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
