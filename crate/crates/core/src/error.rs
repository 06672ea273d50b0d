use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("`{0}` is not a differentiable leaf of this graph")]
    NotALeaf(String),

    #[error("gradient requested for a non-scalar output (shape {0:?})")]
    NonScalarOutput(Vec<usize>),

    #[error("symbol {value} outside the table support [{lo}, {hi}]")]
    SymbolOutOfSupport { value: i32, lo: i32, hi: i32 },

    #[error("probability table has {0} symbols, more than the coder supports")]
    SupportTooLarge(usize),

    #[error("truncated stream")]
    Truncated,

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("weights/config mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at optimization step {step}")]
    NonFinite { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
