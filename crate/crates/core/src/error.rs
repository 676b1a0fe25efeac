use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid knowledge base: {0}")]
    InvalidKb(String),

    #[error("unknown disease id `{0}`")]
    UnknownDisease(String),

    #[error("unknown finding id `{0}`")]
    UnknownFinding(String),

    #[error("finding `{0}` is both present and absent")]
    Overlap(String),

    #[error("all diseases excluded: empty differential")]
    EmptyDifferential,

    #[error("softmax needs at least one finite score")]
    NoFiniteScore,

    #[error("differential weights are not normalizable: {0}")]
    NotNormalizable(String),

    #[error("disease `{0}` is unsuitable for simulation (no nonzero clinical findings)")]
    Unsimulable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    CaseLine { line: usize, message: String },

    #[error("duplicate case id `{0}`")]
    DuplicateCase(String),

    #[error("{0}")]
    Vocabulary(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        Error::Syntax {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
