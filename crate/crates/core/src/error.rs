use thiserror::Error;

/// Errors produced across the ranking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate listing id `{0}`")]
    DuplicateListing(String),

    #[error("{path}:{line}: listing `{listing}` appears more than once in the session")]
    DuplicateInSession {
        path: String,
        line: usize,
        listing: String,
    },

    #[error("{path}:{line}: unknown interaction kind `{kind}`")]
    UnknownInteraction {
        path: String,
        line: usize,
        kind: String,
    },

    #[error("field `{field}` of listing `{listing}` cannot be written: {reason}")]
    InvalidField {
        listing: String,
        field: &'static str,
        reason: &'static str,
    },

    #[error("catalog is empty")]
    EmptyCatalog,

    #[error("cannot normalize an all-zero vector")]
    ZeroVector,

    #[error("no embedding stored for image ref `{0}`")]
    MissingEmbedding(String),

    #[error("listing `{0}` has no image reference")]
    NoImageRef(String),

    #[error("unknown listing `{0}`")]
    UnknownListing(String),

    #[error("embedding `{key}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        key: String,
        expected: usize,
        found: usize,
    },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("no training instances")]
    EmptyInstances,

    #[error("non-finite weights after SGD step {step}")]
    Divergence { step: u64 },

    #[error("invalid cutoff {cutoff} for a ranking of length {len}")]
    InvalidCutoff { cutoff: usize, len: usize },

    #[error("ideal DCG is zero: ranking has no relevant item")]
    ZeroIdcg,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("baseline mean is zero")]
    ZeroBaseline,

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no query meets the minimum of {min_pairs} training pairs")]
    NoEligibleQueries { min_pairs: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
