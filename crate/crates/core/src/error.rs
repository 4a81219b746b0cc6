use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("context overflow: {tokens} tokens exceed the configured maximum of {max}")]
    ContextOverflow { tokens: usize, max: usize },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("task {task_id} is unsolvable: expert failed {attempts} consecutive episodes")]
    Unsolvable { task_id: usize, attempts: usize },

    #[error("training diverged at step {step}, epoch {epoch}: {detail}")]
    Diverged {
        step: usize,
        epoch: usize,
        detail: String,
    },

    #[error("incomplete success tensor: {0}")]
    IncompleteTensor(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
