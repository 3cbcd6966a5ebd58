use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step t={t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined autocorrelation: series has zero variance")]
    ZeroVariance,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
