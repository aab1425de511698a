use proptree_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid document: {0}")]
    InvalidDocument(String),

    #[error("invalid property tree: {0}")]
    InvalidTree(String),

    #[error("overlapping mentions [{0}, {1}) and [{2}, {3})")]
    OverlappingMentions(usize, usize, usize, usize),

    #[error("cycle through {kind} {members:?}")]
    Cycle { kind: &'static str, members: Vec<String> },

    #[error("invalid head assignment: {0}")]
    InvalidAssignment(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("node {0} is unreachable from the root")]
    UnreachableNode(usize),

    #[error("singular Laplacian: entity {0} has no incoming weight")]
    SingularLaplacian(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::InvalidDocument(_) => "invalid-document",
            Error::InvalidTree(_) => "invalid-tree",
            Error::OverlappingMentions(..) => "overlapping-mentions",
            Error::Cycle { .. } => "cycle",
            Error::InvalidAssignment(_) => "invalid-assignment",
            Error::Parse { .. } => "parse",
            Error::UnreachableNode(_) => "unreachable-node",
            Error::SingularLaplacian(_) => "singular-laplacian",
            Error::Empty(_) => "empty",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
