use std::path::PathBuf;

use thiserror::Error;

use crate::client::ClientError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate sample id `{id}` (line {line})")]
    DuplicateId { id: String, line: usize },

    #[error("sample `{id}`: invalid `{field}`: {reason}")]
    Invalid { id: String, field: &'static str, reason: String },

    #[error("unsupported schema_version {0}")]
    UnsupportedSchema(u32),

    #[error("sample `{id}`: image `{uri}` has no recorded dimensions")]
    MissingDimension { id: String, uri: String },

    #[error("sample `{id}`: image `{uri}` has no perceptual hash")]
    MissingHash { id: String, uri: String },

    #[error("unknown stage `{0}`")]
    UnknownStage(String),

    #[error("cannot decode image: {0}")]
    Image(String),

    #[error("bands ({bands}) x rows ({rows}) must equal the signature length ({k})")]
    LshShape { bands: usize, rows: usize, k: usize },

    #[error(transparent)]
    Client(#[from] ClientError),

    #[error("malformed response for {context}: {message}")]
    Format { context: &'static str, message: String },

    #[error("mask has no set pixels")]
    EmptyMask,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("region ({x_min},{y_min})-({x_max},{y_max}) outside {width}x{height} image")]
    RoiOutOfBounds {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
        width: u32,
        height: u32,
    },

    #[error("template slot `{0}` has no value")]
    MissingSlot(String),

    #[error("template references excluded metadata key `{0}`")]
    ExcludedSlot(String),

    #[error("label pool of {pool} is too small for {needed} options")]
    PoolTooSmall { pool: usize, needed: usize },

    #[error("label `{label}` is not in the template pool")]
    LabelNotInPool { label: String },

    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("no prompt template for question type `{0}`")]
    MissingTemplate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("report is already scaled")]
    AlreadyScaled,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("benchmark index: {0}")]
    Index(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(id: &str, field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            id: id.to_string(),
            field,
            reason: reason.into(),
        }
    }
}
