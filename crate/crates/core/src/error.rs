use thiserror::Error;

/// Errors produced while building, validating, or solving an allocation problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("duplicate agent id `{0}`")]
    DuplicateId(String),

    #[error("unknown agent id `{0}`")]
    UnknownId(String),

    #[error("self-loop on agent `{0}`")]
    SelfLoop(String),

    #[error("communication graph is disconnected: `{0}` is unreachable")]
    Disconnected(String),

    #[error("dimension mismatch for `{id}`: {detail}")]
    DimensionMismatch { id: String, detail: String },

    #[error("cost weight of `{id}` is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { id: String, asymmetry: f64 },

    #[error("cost weight of `{id}` is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { id: String, min_eigenvalue: f64 },

    #[error("missing cost for agent `{0}`")]
    MissingCost(String),

    #[error("missing response model for human `{0}`")]
    MissingHumanModel(String),

    #[error("invalid response model for human `{id}`: {detail}")]
    InvalidHumanModel { id: String, detail: String },

    #[error("missing state for neighbor `{0}`")]
    MissingNeighbor(String),

    #[error("attitude magnitude {0} outside (0, 1]")]
    AttitudeRange(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("projection precondition violated: multiplier entry {index} is {value:e} < 0")]
    NegativeMultiplier { index: usize, value: f64 },

    #[error("flow diverged at t = {t}: max |entry| = {max_abs:e}")]
    Divergence { t: f64, max_abs: f64 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("scenario not supported by the centralized oracle: {0}")]
    OracleUnsupported(String),

    #[error("infeasible or degenerate problem: {0}")]
    Infeasible(String),

    #[error("Slater condition fails: {0}")]
    SlaterViolated(String),

    #[error("active-set enumeration bound exceeded: {rows} constraint rows (max {max})")]
    EnumerationBound { rows: usize, max: usize },

    #[error("protocol error on edge {sender} -> {receiver}: {detail}")]
    Protocol {
        sender: String,
        receiver: String,
        detail: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for the command-line tool: 1 for bad input,
    /// 2 for numerical failure, 3 for an infeasible instance.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) | Error::SlaterViolated(_) => 3,
            Error::NegativeMultiplier { .. }
            | Error::Divergence { .. }
            | Error::Consistency(_)
            | Error::OracleUnsupported(_)
            | Error::EnumerationBound { .. }
            | Error::Protocol { .. } => 2,
            _ => 1,
        }
    }
}
