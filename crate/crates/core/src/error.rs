use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite value from {source_name} at {node}")]
    NonFinite { source_name: String, node: String },

    #[error("divergence in block {block}: sup-norm {value:e} exceeds guard {guard:e}")]
    Divergence {
        block: String,
        value: f64,
        guard: f64,
    },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("problem too large for dense assembly: {size} unknowns (limit {limit})")]
    SizeLimit { size: usize, limit: usize },

    #[error("unknown model '{0}'")]
    UnknownModel(String),

    #[error("forward solve did not converge: {0}")]
    NotConverged(String),
}

impl Error {
    /// Short machine-readable tag used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Index(_) => "index",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::Singular(_) => "singular",
            Error::SizeLimit { .. } => "size_limit",
            Error::UnknownModel(_) => "unknown_model",
            Error::NotConverged(_) => "not_converged",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
