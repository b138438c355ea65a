use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("input shape error: {0}")]
    InputShape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("internal invariant violated at node ({row},{col}): {detail}")]
    GridInvariant {
        row: usize,
        col: usize,
        detail: String,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite loss in branch {branch} (value {value})")]
    NonFiniteLoss { branch: usize, value: f32 },
}

pub type Result<T> = core::result::Result<T, Error>;
