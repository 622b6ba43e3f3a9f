use num_complex::Complex64;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected} samples, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "ill-conditioned trace solve at k = {k}: relative residual {residual:.3e}, \
         condition estimate {condition:.3e}"
    )]
    IllConditioned {
        k: Complex64,
        residual: f64,
        condition: f64,
    },

    #[error("iterative solver stopped after {iterations} iterations at relative residual {residual:.3e}")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Parameter(_) | Error::Shape { .. } | Error::Config(_) | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
