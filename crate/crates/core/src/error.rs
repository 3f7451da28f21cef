use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("expected {expected} tokens, found {found}")]
    TokenCountMismatch { expected: usize, found: usize },

    #[error("non-positive price {value} in series {series} at period {period}")]
    NonPositivePrice {
        series: usize,
        period: usize,
        value: f64,
    },

    #[error("malformed number {token:?} at token {position}")]
    MalformedNumber { token: String, position: usize },

    #[error("invalid price panel: {0}")]
    InvalidPanel(String),

    #[error("train count {train_count} out of range for {total} return rows")]
    BadSplit { train_count: usize, total: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("parameter {name} must be non-negative, got {value}")]
    NegativeParameter { name: &'static str, value: f64 },

    #[error("cardinality {k} out of range for {n} assets")]
    KOutOfRange { k: usize, n: usize },

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("bounds [{eta}, {delta}] infeasible for {k} assets with unit budget")]
    InfeasibleBounds { eta: f64, delta: f64, k: usize },

    #[error("C({n}, {k}) = {subsets} subsets exceeds the enumeration limit of {limit}")]
    TooLarge {
        n: usize,
        k: usize,
        subsets: u128,
        limit: u128,
    },

    #[error("baseline out-of-sample error must be positive, got {0}")]
    ZeroBaseline(f64),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
