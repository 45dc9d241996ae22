use thiserror::Error;

/// Errors raised while building or solving a discrete mean field game.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MfgError {
    /// The problem data violates a structural assumption (e.g. singular `B1`).
    #[error("structural error: {0}")]
    Structural(String),

    /// The discretization parameters are not admissible.
    #[error("configuration error: {message}")]
    Configuration {
        message: String,
        /// Largest admissible space step for the requested time step, when relevant.
        max_admissible_dx: Option<f64>,
    },

    /// A mathematical invariant of the scheme was broken. Indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),

    /// Non-finite numbers appeared during a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The lattice level sets grew past the configured cap.
    #[error("level set S_{k} has {size} nodes, exceeding the cap of {cap}")]
    LevelSetTooLarge { k: usize, size: usize, cap: usize },

    /// The discretized initial measure misses part of the support.
    #[error("coverage error: quadrature captured mass {mass:.6} (< 0.99)")]
    Coverage { mass: f64 },

    /// An API was called with inconsistent arguments.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, MfgError>;

impl MfgError {
    pub(crate) fn config(message: impl Into<String>) -> Self {
        MfgError::Configuration {
            message: message.into(),
            max_admissible_dx: None,
        }
    }
}
