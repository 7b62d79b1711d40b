use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("compute graph was already consumed by a backward pass")]
    GraphReuse,

    #[error("function is not deterministic: {0}")]
    Determinism(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing or non-string field `{field}`")]
    Schema { line: usize, field: String },

    #[error("prompt pattern error: {0}")]
    Pattern(String),

    #[error("token `{0}` is not in the vocabulary")]
    Vocabulary(String),

    #[error("unknown label `{0}`")]
    Label(String),

    #[error("invalid corpus spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
