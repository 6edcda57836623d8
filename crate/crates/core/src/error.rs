use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value first produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("gradient requested for a node that was not recorded")]
    UnrecordedNode,

    #[error("cannot read image {path}: {reason}")]
    ImageRead { path: PathBuf, reason: String },

    #[error("cannot write image {path}: {reason}")]
    ImageWrite { path: PathBuf, reason: String },

    #[error("checkpoint magic mismatch (not a WMCK file)")]
    CheckpointMagic,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint is missing tensor `{0}`")]
    CheckpointMissingTensor(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
