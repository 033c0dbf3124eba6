use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Model construction was asked for a family the builder does not know.
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),

    /// The requested coefficients violate uniform ellipticity.
    #[error("ellipticity violated: {0}")]
    EllipticityViolated(String),

    /// A structurally invalid configuration value (bad field, missing file,
    /// unsupported dimension, malformed JSON, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An argument outside an operation's documented domain
    /// (`s >= t`, derivative order too high, non-positive scale, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A quadrature produced a non-finite value or could not meet its
    /// truncation bound.
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A density field lost too much mass through the grid boundary; the
    /// message carries a resize hint.
    #[error("mass leakage: {0}")]
    MassLeakage(String),

    /// A requested field does not fit in the configured memory budget.
    #[error("grid overflow: {0}")]
    GridOverflow(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
