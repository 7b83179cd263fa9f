use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("jacobi svd did not converge on {rows}x{cols} input after {sweeps} sweeps")]
    SvdNoConvergence { rows: usize, cols: usize, sweeps: usize },

    #[error("newton-schulz needs a nonzero input")]
    ZeroMatrix,

    #[error("option II requires a twin gradient for layer `{0}`")]
    MissingTwin(String),

    #[error("gradient for layer `{0}` contains NaN")]
    NanGradient(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing telemetry: {0}")]
    MissingTelemetry(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::SvdNoConvergence { .. } => "svd_no_convergence",
            Error::ZeroMatrix => "zero_matrix",
            Error::MissingTwin(_) => "missing_twin",
            Error::NanGradient(_) => "nan_gradient",
            Error::Invalid(_) => "invalid",
            Error::Config { .. } => "config",
            Error::MissingTelemetry(_) => "missing_telemetry",
            Error::Io { .. } => "io",
        }
    }
}
