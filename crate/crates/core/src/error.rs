use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty language list")]
    EmptyLanguages,

    #[error("unknown language tag `{0}`")]
    UnknownLanguage(String),

    #[error("duplicate segment id `{0}`")]
    DuplicateId(String),

    #[error("malformed corpus record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("insufficient segments: {0}")]
    InsufficientSegments(String),

    #[error("document for segment set `{set_id}` has {tokens} tokens, limit is {limit}")]
    OversizedDocument { set_id: String, tokens: usize, limit: usize },

    #[error("cannot balance {requested} permutations over {n} positions: {reason}")]
    Unbalanceable { requested: usize, n: usize, reason: String },

    #[error("empty text")]
    EmptyText,

    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("operation requires mean pooling")]
    RequiresMeanPooling,

    #[error("position {position} out of range 1..={n}")]
    InvalidPosition { position: usize, n: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("basket {basket} has zero attention mass")]
    ZeroMassBasket { basket: usize },

    #[error("invalid attention row: {0}")]
    InvalidDistribution(String),

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("rank-deficient design matrix (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("need at least 2 clusters, got {0}")]
    SingleCluster(usize),

    #[error("need more observations than parameters ({obs} <= {params})")]
    TooFewObservations { obs: usize, params: usize },

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding cache corrupted at {path}:{line}: {reason}")]
    CacheCorrupt { path: PathBuf, line: usize, reason: String },

    #[error("embedding not in cache for hash {0}")]
    CacheMiss(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("missing variant results: {0}")]
    MissingVariant(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI's error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyLanguages => "empty_languages",
            Error::UnknownLanguage(_) => "unknown_language",
            Error::DuplicateId(_) => "duplicate_id",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::InsufficientSegments(_) => "insufficient_segments",
            Error::OversizedDocument { .. } => "oversized_document",
            Error::Unbalanceable { .. } => "unbalanceable",
            Error::EmptyText => "empty_text",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::RequiresMeanPooling => "requires_mean_pooling",
            Error::InvalidPosition { .. } => "invalid_position",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::ZeroMassBasket { .. } => "zero_mass_basket",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::ZeroVector => "zero_vector",
            Error::EmptyInput(_) => "empty_input",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::SingleCluster(_) => "single_cluster",
            Error::TooFewObservations { .. } => "too_few_observations",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::CacheCorrupt { .. } => "cache_corrupt",
            Error::CacheMiss(_) => "cache_miss",
            Error::Transport(_) => "transport",
            Error::MissingVariant(_) => "missing_variant",
            Error::Manifest(_) => "manifest",
            Error::Unsupported(_) => "unsupported",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
