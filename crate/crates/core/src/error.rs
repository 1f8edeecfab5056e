use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter registration failed: {0}")]
    Registration(String),

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }
}
