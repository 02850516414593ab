//! Shared error type for every stage of the retrieval pipeline.

/// Failure modes surfaced by the toolkit.
///
/// Each variant maps to a stable machine-readable code (see [`Error::code`])
/// so callers such as the CLI can emit structured diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An id appeared more than once where ids must be unique.
    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },
    /// A line of an input file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// A parsed record is missing fields or has fields of the wrong kind.
    #[error("schema error: {0}")]
    Schema(String),
    /// A binary artifact is malformed (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),
    /// Numeric payload violates a data invariant (non-finite values, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Not enough rows or samples to perform the requested operation.
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    /// Dimension or shape mismatch between related artifacts.
    #[error("shape error: {0}")]
    Shape(String),
    /// A cluster budget cannot be honored.
    #[error("budget error: {0}")]
    Budget(String),
    /// A label is out of range or refers to an unknown class.
    #[error("label error: {0}")]
    Label(String),
    /// Hard-negative mining is impossible (e.g. single-identity catalog).
    #[error("mining error: {0}")]
    Mining(String),
    /// Cross-artifact referential check failed.
    #[error("validation error: {0}")]
    Validation(String),
    /// A search pool came up empty (empty index or over-restrictive filter).
    #[error("empty pool: {0}")]
    EmptyPool(String),
    /// A sampling step cannot produce the requested example.
    #[error("sampling error: {0}")]
    Sampling(String),
    /// The training corpus contains no usable examples.
    #[error("empty corpus")]
    EmptyCorpus,
    /// Lookup of an id that the artifact does not contain.
    #[error("missing entity {id:?}")]
    MissingEntity { id: String },
    /// An internal call-contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Re-ranking ran out of candidates for an instance.
    #[error("pool exhausted for instance {instance:?} at output column {column}")]
    PoolExhausted { instance: String, column: usize },
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code for this error, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateId { .. } => "DuplicateId",
            Error::Parse { .. } => "ParseError",
            Error::Schema(_) => "SchemaError",
            Error::Format(_) => "FormatError",
            Error::Data(_) => "DataError",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::Shape(_) => "ShapeError",
            Error::Budget(_) => "BudgetError",
            Error::Label(_) => "LabelError",
            Error::Mining(_) => "MiningError",
            Error::Validation(_) => "ValidationError",
            Error::EmptyPool(_) => "EmptyPoolError",
            Error::Sampling(_) => "SamplingError",
            Error::EmptyCorpus => "EmptyCorpusError",
            Error::MissingEntity { .. } => "MissingEntity",
            Error::Contract(_) => "ContractError",
            Error::PoolExhausted { .. } => "PoolExhausted",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
