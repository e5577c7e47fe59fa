use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A single failed schedule condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleViolation {
    pub node: usize,
    pub t: usize,
    pub condition: ScheduleCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleCondition {
    /// theta must be strictly positive.
    NonPositiveStep,
    /// eta_i(t) < theta
    BelowStep,
    /// eta_i(t+1) < eta_i(t)
    Decreasing,
    /// eta_i(t) is not finite
    NonFinite,
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.condition {
            ScheduleCondition::NonPositiveStep => "theta <= 0",
            ScheduleCondition::BelowStep => "eta < theta",
            ScheduleCondition::Decreasing => "eta(t+1) < eta(t)",
            ScheduleCondition::NonFinite => "eta not finite",
        };
        write!(f, "node {} at t={}: {}", self.node, self.t, what)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected: node {unreachable} cannot be reached from node 0")]
    DisconnectedGraph { unreachable: usize },
    #[error("invalid edge ({0}, {1})")]
    InvalidEdge(usize, usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("all singular values are zero")]
    ZeroMatrix,
    #[error("non-finite input")]
    NonFinite,
    #[error("non-finite objective value or gradient")]
    NonFiniteObjective,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inner solver did not converge (gradient norm {gradient_norm:e} after {iterations} iterations)")]
    SolverDidNotConverge { gradient_norm: f64, iterations: usize },
    #[error("invalid penalty schedule: {}", display_list(.0))]
    ScheduleInvalid(Vec<ScheduleViolation>),
    #[error("dual step condition violated at nodes {0:?}")]
    ThetaConditionViolated(Vec<usize>),
    #[error("noise scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),
    #[error("dual matrix is not in the column space of the Laplacian (residual {0:e})")]
    NotInColumnSpace(f64),
    #[error("objective is not strongly convex (m = {0})")]
    NotStronglyConvex(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("penalty schedule of the target node is unknown to the attacker")]
    UnknownSchedule,
    #[error("no rows left after removing missing values")]
    EmptyAfterFiltering,
    #[error("unknown label value {0:?}")]
    UnknownLabelValue(String),
    #[error("cannot split {samples} samples over {nodes} nodes")]
    TooManyNodes { nodes: usize, samples: usize },
    #[error("iteration {t} outside trace of length {len}")]
    IterationOutOfRange { t: usize, len: usize },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn display_list(v: &[ScheduleViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
