use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero vector has undefined direction")]
    ZeroVector,
    #[error("neighborhood larger than bank (k = {k}, usable = {usable})")]
    NeighborhoodTooLarge { k: usize, usable: usize },
    #[error("class has zero total mass (class {0})")]
    ZeroClassMass(usize),
    #[error("unknown sample id {0}")]
    UnknownId(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("method/bank mismatch: {0}")]
    BankMismatch(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
