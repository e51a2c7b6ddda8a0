use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("pinning vector must have at least one nonzero entry")]
    NoPinnedNode,
    #[error("control graph has no spanning tree rooted at a pinned node; unreachable nodes: {unreachable:?}")]
    NoPinnedSpanningTree { unreachable: Vec<usize> },
    #[error("pinned Laplacian is numerically singular")]
    SingularTopology,
    #[error("Theta (L + G) + (L + G)' Theta is not positive definite (min eigenvalue {min_eigenvalue:e}); the certificate does not apply to this control graph")]
    IndefiniteTopology { min_eigenvalue: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("{name} must be symmetric positive definite")]
    NotPositiveDefinite { name: String },
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("LMI program is infeasible (least achievable max eigenvalue {max_eigenvalue:e})")]
    Infeasible { max_eigenvalue: f64 },
    #[error("solver exhausted {iterations} iterations before finding a feasible point")]
    MaxIterations { iterations: usize },
    #[error("Y is singular or not positive definite")]
    SingularY,
    #[error("placement {value} at t = {time} lies outside [-{length}, {length}]")]
    PlacementOutOfRange { time: f64, value: f64, length: f64 },
    #[error("coupling gain has no known uniform bound")]
    UnboundedGain,
    #[error("sample grid mismatch: {0}")]
    GridMismatch(String),
    #[error("state diverged at t = {time}")]
    NonFiniteState { time: f64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
