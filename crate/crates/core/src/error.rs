use std::path::PathBuf;

use crate::types::PriorViolation;

pub type Result<T, E = DmfpError> = std::result::Result<T, E>;

/// A single field-level problem found while parsing a run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DmfpError {
    #[error("invalid prior: {}", join(.0))]
    InvalidPrior(Vec<PriorViolation>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("root not bracketed: f({lo}) = {f_lo}, f({hi}) = {f_hi}")]
    Bracketing {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("quadrature did not converge on [{lo}, {hi}] after {doublings} doublings (last change {last_change:e})")]
    QuadratureFailure {
        lo: f64,
        hi: f64,
        doublings: u32,
        last_change: f64,
    },

    #[error("mean-field recursion is unstable: variance gain {gain} >= 1")]
    Instability { gain: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid configuration: {}", join(.0))]
    Config(Vec<FieldError>),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DmfpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DmfpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class errors map to CLI exit status 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DmfpError::InvalidPrior(_)
                | DmfpError::InvalidArgument(_)
                | DmfpError::ShapeMismatch(_)
                | DmfpError::Config(_)
        )
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
