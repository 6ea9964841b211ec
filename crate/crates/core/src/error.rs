use std::path::PathBuf;

/// Errors raised by the library. The CLI maps these onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("layer `{layer_id}`: {reason}")]
    Layer { layer_id: String, reason: String },

    #[error("network: {0}")]
    Network(String),

    #[error("non-finite loss {loss} at step {step}")]
    Divergence { loss: f64, step: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing inputs in {dir}: {missing:?}")]
    MissingInputs { dir: PathBuf, missing: Vec<String> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 configuration, 2 divergence, 3 I/O or file format.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Divergence { .. } => 2,
            Error::Io { .. } | Error::Format { .. } | Error::MissingInputs { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn layer(layer_id: &str, reason: impl Into<String>) -> Self {
        Error::Layer {
            layer_id: layer_id.to_string(),
            reason: reason.into(),
        }
    }
}
