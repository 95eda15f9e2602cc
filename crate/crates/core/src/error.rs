use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("window error: {message} (max feasible window count = {max_feasible})")]
    Window { message: String, max_feasible: usize },

    #[error("computation error: {0}")]
    Computation(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("invariant `{invariant}` violated in {module}: {detail}")]
    Invariant {
        module: &'static str,
        invariant: &'static str,
        detail: String,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Validation-class errors map to exit status 1 in the CLI, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::MissingArtifact(_) | Error::Split(_) | Error::Parse { .. }
        )
    }
}
