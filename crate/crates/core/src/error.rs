use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown operator kind `{0}`")]
    UnknownKind(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires a gradient")]
    DetachedLoss,

    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGradient(String),

    #[error("epoch {epoch} out of range for a schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("graph contains a cycle")]
    CyclicGraph,

    #[error("node {0} is not on a path from input to output")]
    Unreachable(usize),

    #[error("no switch setting for switch node {0}")]
    MissingSwitch(usize),

    #[error("unknown node id {0}")]
    DanglingNode(usize),

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("document version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("similarity matrix is empty")]
    EmptyMatrix,

    #[error("matching would create a cycle in the combined graph")]
    AcyclicityViolation,

    #[error("nodes {0} and {1} cannot be joined by a stitch")]
    IncompatiblePair(usize, usize),

    #[error("{0} is out of range")]
    OutOfRange(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing records for stitch {0}")]
    MissingRecords(usize),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("privileged data access is required for {0}")]
    PrivilegeRequired(String),

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
