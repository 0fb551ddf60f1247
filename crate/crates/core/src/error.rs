use thiserror::Error;

#[derive(Error, Debug)]
pub enum CtxError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph too large: {0}")]
    TooLarge(String),
    #[error("unknown relation: {0}")]
    UnknownRelation(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("checkpoint has bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint config digest mismatch")]
    DigestMismatch,
    #[error("truncated or malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("config parse error at line {line}: {detail}")]
    ConfigParse { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CtxError>;
