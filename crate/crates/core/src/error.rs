use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("exp overflow in sinkhorn normalization; divide the logits by tau or rescale the input")]
    ExpOverflow,

    #[error("sinkhorn normalization underflowed ({0}); use a larger temperature")]
    Underflow(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("N:M invariant violated at row {row}, group {group}: {detail}")]
    NmViolation {
        row: usize,
        group: usize,
        detail: String,
    },

    #[error("refusing exhaustive search: {0}")]
    TooLarge(String),

    #[error("stage mismatch between `{from}` and `{to}`: {detail}")]
    StageMismatch {
        from: String,
        to: String,
        detail: String,
    },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("blob shorter than manifest extent: need {needed} bytes, have {actual}")]
    BlobTruncated { needed: u64, actual: u64 },

    #[error("tensor `{0}` has an offset or length that overflows")]
    OffsetOverflow(String),

    #[error("tensors `{0}` and `{1}` overlap in the blob")]
    OverlappingTensors(String, String),

    #[error("compressed N:M stream: {0}")]
    Codec(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidPermutation(_) => "invalid_permutation",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::ExpOverflow => "exp_overflow",
            Error::Underflow(_) => "underflow",
            Error::Config(_) => "config",
            Error::NmViolation { .. } => "nm_violation",
            Error::TooLarge(_) => "too_large",
            Error::StageMismatch { .. } => "stage_mismatch",
            Error::BackwardBeforeForward => "backward_before_forward",
            Error::Manifest(_) => "manifest",
            Error::BlobTruncated { .. } => "blob_truncated",
            Error::OffsetOverflow(_) => "offset_overflow",
            Error::OverlappingTensors(..) => "overlapping_tensors",
            Error::Codec(_) => "codec",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit status: 2 for bad configuration or input files, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_)
            | Error::Manifest(_)
            | Error::BlobTruncated { .. }
            | Error::OffsetOverflow(_)
            | Error::OverlappingTensors(..)
            | Error::Io(_)
            | Error::Json(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
