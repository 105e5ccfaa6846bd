use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input document (bad header, missing column, unparsable cell).
    #[error("format error: {0}")]
    Format(String),

    /// Input value outside its admissible domain.
    #[error("value error: {0}")]
    Value(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no steady state found (best coefficient of variation {best_cv:.4})")]
    NoSteadyState { best_cv: f64 },

    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual_norm:e} J)")]
    Solver {
        iterations: usize,
        residual_norm: f64,
        best_iterate: Vec<f64>,
    },

    #[error("scaling derivation error: {0}")]
    Derivation(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("benchmark {name}: {source}")]
    Benchmark {
        name: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_benchmark(self, name: &str) -> Self {
        Error::Benchmark {
            name: name.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through benchmark tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Benchmark { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
