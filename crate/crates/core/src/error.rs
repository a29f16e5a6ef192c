use std::path::PathBuf;

use thiserror::Error;

use crate::graph::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a 1x1 value, got {0:?}")]
    NotScalar((usize, usize)),

    #[error("variable {0} is not recorded on this tape")]
    NotOnTape(usize),

    #[error("forward pass is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("JSON syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("invalid sample: {}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("unknown node id {0}")]
    UnknownNode(i64),

    #[error("layer `{0}` has no nodes; adjust the modality schedule")]
    EmptyLayer(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numeric machinery rather than of inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonDeterministic { .. } | Error::NotScalar(_)
        )
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
