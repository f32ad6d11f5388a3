use thiserror::Error;

/// Errors raised while loading or validating a network topology.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("line {line} references unknown bus {bus}")]
    UnknownBus { line: u64, bus: u64 },
    #[error("line {line} connects buses of different feeders ({from_feeder} and {to_feeder})")]
    CrossFeeder { line: u64, from_feeder: u64, to_feeder: u64 },
    #[error("bus {bus} belongs to unknown feeder {feeder}")]
    UnknownFeeder { bus: u64, feeder: u64 },
    #[error("feeder {feeder}: cannot determine a unique root bus ({reason})")]
    AmbiguousRoot { feeder: u64, reason: String },
    #[error("cycle detected: line {line} closes a loop")]
    Cycle { line: u64 },
    #[error("bus {bus} is not connected to its feeder transformer")]
    Dangling { bus: u64 },
    #[error("line {line}: {reason}")]
    InvalidLine { line: u64, reason: String },
    #[error("transformer {transformer}: invalid nameplate ({reason})")]
    InvalidNameplate { transformer: u64, reason: String },
    #[error("unknown line id {0}")]
    UnknownLine(u64),
    #[error("topology parse error: {0}")]
    Parse(String),
}

/// Errors from the scheduling solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("problem shape mismatch: {0}")]
    Shape(String),
    #[error("exhaustive search budget exceeded: {bits} bits > {limit}")]
    BudgetExceeded { bits: usize, limit: usize },
    #[error("relaxed solver did not converge after {iterations} iterations (residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },
    #[error("repair loop exceeded {limit} flips")]
    RepairLimit { limit: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Errors from the power-flow solver and its consistency checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("power flow diverged after {iterations} iterations (last mismatch {mismatch:e} pu)")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("missing load for bus {0}")]
    MissingBus(u64),
    #[error("numerical consistency fault on branch {branch}: {detail}")]
    Consistency { branch: u64, detail: String },
}

/// Top-level error for configuration, scenario, and pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("solver error: {0}")]
    Solver(#[from] SolverError),
    #[error("power flow error: {0}")]
    PowerFlow(#[from] PowerFlowError),
    #[error("malformed profile: {0}")]
    Profile(String),
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
