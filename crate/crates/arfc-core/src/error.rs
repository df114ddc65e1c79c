//! Crate-wide error type.
//!
//! Numeric code fails loudly: shape disagreements and invalid layer
//! configurations are reported at construction time, and any NaN/Inf produced
//! by a forward or backward kernel is a hard `NonFinite` error rather than a
//! value that silently propagates.

/// Unified error for tensor ops, model construction, training, and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected layout) disagree in shape.
    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },

    /// A block or network was configured with impossible channel/kernel
    /// arithmetic. Raised at construction, never mid-forward.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An op was asked to produce an output with a non-positive or otherwise
    /// impossible dimension.
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    /// A kernel produced NaN or Inf.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A text or binary input could not be decoded. `offset` is a byte
    /// position into the input where decoding failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A training step failed (typically a non-finite loss); identifies
    /// where so a long run can be resumed or bisected.
    #[error("training aborted at epoch {epoch}, batch {batch}: {source}")]
    TrainAbort {
        epoch: usize,
        batch: usize,
        source: Box<Error>,
    },

    /// Structurally valid input with unusable content (missing files listed
    /// in a manifest, empty dataset, mismatched image/mask sizes, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for shape mismatches; keeps call sites short.
    pub fn shape(context: impl Into<String>, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
