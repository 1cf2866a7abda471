use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expected a scalar output, got shape {0:?}")]
    NonScalar(alloc::vec::Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("row {row} is not a distribution (sum {sum})")]
    NotADistribution { row: usize, sum: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("{requested} classes requested but only {available} glyph families exist")]
    TooManyClasses { requested: usize, available: usize },

    #[error("non-finite {component} at step {step}")]
    Divergence { component: &'static str, step: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
