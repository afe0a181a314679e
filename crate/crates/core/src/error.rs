use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by drivers to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Privacy,
    Scheduling,
    Stalled,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("metadata already stripped from this slide")]
    AlreadyStripped,
    #[error("privacy precondition violated: {0}")]
    PrivacyPrecondition(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("incomplete aggregation: missing outputs from {}", describe_missing(.missing))]
    IncompleteAggregation { missing: Vec<(usize, usize)> },
    #[error("duplicate output for encoded id {encoded_id} (shard {shard})")]
    DuplicateOutput { encoded_id: u64, shard: usize },
    #[error("unknown encoded id {0}")]
    UnknownEncodedId(u64),
    #[error("shard {0} is empty; execution time must be positive")]
    EmptyShard(usize),
    #[error("shard {0} is not mapped to any infrastructure")]
    UnmappedShard(usize),
    #[error("enumeration of {size} assignments exceeds budget {budget}; use the heuristic planner")]
    BudgetExceeded { size: u128, budget: u64 },
    #[error("pareto front is empty")]
    EmptyFront,
    #[error("simulation stalled with {} unprocessed tiles: {:?}", .unprocessed.len(), .unprocessed)]
    SimulationStalled { unprocessed: Vec<u64> },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn describe_missing(missing: &[(usize, usize)]) -> String {
    missing.iter().map(|(shard, n)| format!("shard {shard} ({n} tiles)")).collect::<Vec<_>>().join(", ")
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::AlreadyStripped | Error::PrivacyPrecondition(_) => ErrorKind::Privacy,
            Error::BudgetExceeded { .. } | Error::EmptyFront | Error::EmptyShard(_) | Error::UnmappedShard(_) => {
                ErrorKind::Scheduling
            }
            Error::SimulationStalled { .. } => ErrorKind::Stalled,
            _ => ErrorKind::Validation,
        }
    }
}
