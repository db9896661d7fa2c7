use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A matrix of the parent system does not respect the requested block structure.
    #[error("{matrix} is not block-decomposable at block ({row_block}, {col_block})")]
    NotBlockDecomposable { matrix: String, row_block: usize, col_block: usize },

    #[error("no state supplied for neighbor {0}")]
    MissingNeighborState(usize),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("budget weights sum to {0}, expected 1")]
    WeightsDontSum(f64),

    #[error("reliability needs more samples than dimensions (samples {samples}, dimension {dim})")]
    InsufficientSamples { samples: usize, dim: usize },

    /// The product of neighbour reliabilities does not exceed the agent's violation level.
    #[error("composed feasibility bound is vacuous (product of reliabilities {product}, violation level {violation})")]
    VacuousBound { product: f64, violation: f64 },

    #[error("cannot fit a box to an empty sample set")]
    EmptySampleSet,

    #[error("tightened constraint row {row} cannot be satisfied by any input")]
    EmptyTightenedSet { row: usize },

    #[error("local subproblem of agent {agent} is infeasible")]
    SubproblemInfeasible { agent: usize },

    #[error("scenario program infeasible after {attempts} draws at step {step}")]
    Infeasible { step: usize, attempts: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown agent {0}")]
    UnknownAgent(usize),

    #[error("coupling specification is not connected to the network: {0}")]
    DisconnectedCouplingSpec(String),

    #[error("codec error: {0}")]
    Codec(String),

    /// A message was delivered out of its iteration or left unconsumed.
    #[error("message protocol violated: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, Error>;
