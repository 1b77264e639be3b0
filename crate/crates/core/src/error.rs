use thiserror::Error;

/// Errors raised by mesh construction, evaluation, diagnostics and solves.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain specification: {0}")]
    InvalidSpec(String),

    #[error("local coordinate {0} outside [0, 1]")]
    Domain(f64),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("interpolation failed at node {node} ({x}, {y}): non-finite {what}")]
    Interpolation {
        node: usize,
        x: f64,
        y: f64,
        what: &'static str,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("boundary condition error: {0}")]
    Specification(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line search stagnated after {iterations} iterations (gradient norm {gradient_norm:e})")]
    Stagnation {
        iterations: usize,
        gradient_norm: f64,
        /// Best iterate reached, as a flat DOF vector.
        best: Vec<f64>,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
