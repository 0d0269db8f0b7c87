use thiserror::Error;

/// Errors produced by xplain-core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("cycle detected at node `{0}`")]
    Cycle(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("registration error: {0}")]
    Registration(String),

    #[error("node `{node}` is incompatible with mapping `{mapping}`: {requirement}")]
    Incompatible {
        node: String,
        mapping: String,
        requirement: String,
    },

    #[error("mapping `{mapping}` violated its shape contract: {detail}")]
    MappingContract { mapping: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("regression error: {0}")]
    Regression(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
