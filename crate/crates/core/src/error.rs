use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {got} cannot follow stage {last}")]
    StageOrder { last: usize, got: usize },
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("duplicate class id {0}")]
    DuplicateClass(u32),
    #[error("stage {stage} attempted to read class {class}, which belongs to another stage")]
    CrossStageAccess { stage: usize, class: u32 },
    #[error("no training data for stage {0}")]
    EmptyStage(usize),
    #[error("missing gradient for learnable tensor {0}")]
    MissingGradient(String),
    #[error("tensor {0} is not covered by any parameter group")]
    UnregisteredTensor(String),
    #[error("{context}: truncated at byte {offset} (needed {needed} more bytes)")]
    Truncated {
        context: &'static str,
        offset: usize,
        needed: usize,
    },
    #[error("{context}: bad magic {found:?}")]
    BadMagic { context: &'static str, found: [u8; 4] },
    #[error("{context}: unsupported version {found}")]
    BadVersion { context: &'static str, found: u32 },
    #[error("checkpoint entry {name}: {reason}")]
    CheckpointEntry { name: String, reason: String },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
