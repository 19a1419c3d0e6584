use std::path::PathBuf;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank} in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("normalization failed: {0}")]
    Normalization(String),
    #[error("encoding failed: {0}")]
    Encoding(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("ensemble failed: {0}")]
    Ensemble(String),
    #[error("gradient check failed: {0}")]
    Check(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}, component {component}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        component: &'static str,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn from_json(err: serde_path_to_error::Error<serde_json::Error>) -> Self {
        let field = err.path().to_string();
        let inner = err.into_inner();
        // serde reports missing fields against the parent path; surface the field name itself.
        let message = inner.to_string();
        let field = match missing_field_name(&message) {
            Some(name) if field == "." => name.to_string(),
            Some(name) => format!("{field}.{name}"),
            None => field,
        };
        Error::Parse { field, message }
    }
}

fn missing_field_name(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}
