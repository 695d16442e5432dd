//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Numerical routines fail loudly rather than silently degrading: a kernel
/// that cannot be normalized, a factorization that loses positive
/// definiteness, or a penalty weight below the curvature of the local
/// objective each map to a dedicated variant.
#[derive(Debug, Error)]
pub enum Error {
    /// A kernel parameter is outside its valid range (for example a
    /// non-positive RBF bandwidth).
    #[error("invalid kernel parameter: {0}")]
    InvalidKernelParameter(String),

    /// Two operands do not agree on a dimension.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An input or intermediate value is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A self-kernel value needed for normalization is zero or negative.
    #[error("kernel normalization failed: {0}")]
    Normalization(String),

    /// A matrix that must be symmetric is not.
    #[error("matrix not symmetric: {0}")]
    NotSymmetric(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("factorization of {context} failed: pivot {pivot:e} at index {index}")]
    Factorization {
        /// What was being factored (for example which node's kernel block).
        context: String,
        /// Value of the failing pivot.
        pivot: f64,
        /// Row/column index of the failing pivot.
        index: usize,
    },

    /// The spectrum carries no usable leading direction (top eigenvalue
    /// numerically zero).
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    /// An iterative eigenvalue solver exhausted its iteration budget.
    #[error("eigenvalue iteration did not converge: {0}")]
    NoConvergence(String),

    /// Invalid or disconnected communication topology.
    #[error("topology error: {0}")]
    Topology(String),

    /// Malformed penalty-weight schedule.
    #[error("penalty schedule error: {0}")]
    Schedule(String),

    /// The penalty weights at a node are too small for its coefficient
    /// update to be well posed.
    #[error(
        "ρ too small for node {node}: need Σρ > 2·λ₁(K_j) \
         but Σρ = {sum_rho} and 2·λ₁(K_j) = {two_lambda1}"
    )]
    RhoTooSmall {
        /// Node whose update is ill posed.
        node: usize,
        /// Sum of penalty weights on constraints held at the node.
        sum_rho: f64,
        /// Twice the top eigenvalue of the node's centered kernel block.
        two_lambda1: f64,
    },

    /// A node received the wrong set of messages for a synchronous round.
    #[error("synchronous protocol violation at node {node}: {detail}")]
    Protocol {
        /// Node that observed the violation.
        node: usize,
        /// What was missing, duplicated, or malformed.
        detail: String,
    },

    /// A similarity or other metric is undefined for the given inputs.
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Dataset loading or partitioning failed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// Path being read or written.
        path: String,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an [`std::io::Error`] with the path that produced it.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
