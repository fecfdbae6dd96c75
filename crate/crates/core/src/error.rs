use std::fmt;

use thiserror::Error;

/// One problem found while validating a record.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostic {
    pub record: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(record: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            record: record.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.record, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{0}: non-finite value")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation failed: {}", join_diagnostics(.0))]
    Validation(Vec<Diagnostic>),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("{path}: {source}")]
    Path {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    const SHOWN: usize = 8;
    let mut s = d
        .iter()
        .take(SHOWN)
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ");
    if d.len() > SHOWN {
        s.push_str(&format!("; ... ({} more)", d.len() - SHOWN));
    }
    s
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn path_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Path {
        path: path.display().to_string(),
        source,
    }
}
