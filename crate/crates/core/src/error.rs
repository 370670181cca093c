//! Error type shared by all owq-core modules.

use thiserror::Error;

/// Errors produced by the quantization library.
#[derive(Debug, Error)]
pub enum OwqError {
    /// Tensor shapes do not compose for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A tensor had a zero-sized dimension where data is required.
    #[error("degenerate shape for '{name}': {shape:?}")]
    DegenerateShape { name: String, shape: Vec<usize> },

    /// Archive entry name collides with an existing entry.
    #[error("duplicate archive entry '{0}'")]
    DuplicateEntry(String),

    /// Archive file does not start with a valid OWQT header.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    /// Payload bytes on disk disagree with the header's declared extents.
    #[error("payload length mismatch: {0}")]
    PayloadLengthMismatch(String),

    /// A floating-point entry contained NaN or infinity.
    #[error("non-finite value in entry '{0}'")]
    NonFinite(String),

    /// An archive entry is missing or has the wrong dtype.
    #[error("missing archive entry '{0}'")]
    MissingEntry(String),

    /// A parameter failed validation (range, positivity, ...).
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Hessian has no accumulated calibration signal.
    #[error("all-zero Hessian: no calibration data accumulated")]
    AllZeroHessian,

    /// Cholesky factorization failed; matrix is not positive definite.
    #[error("factorization failure: matrix not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    /// A quantization code exceeds the representable range for the bit-width.
    #[error("code {code} out of range for {bits}-bit grid")]
    CodeOutOfRange { code: u16, bits: u8 },

    /// Input slice was empty where values are required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Layer input width exceeds the 16-bit column-index format.
    #[error("layer too wide: c_in {c_in} exceeds the u16 index limit of 65536")]
    LayerTooWide { c_in: usize },

    /// Skip/selection sets disagree between pipeline stages.
    #[error("inconsistent skip sets: {0}")]
    InconsistentSkipSet(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Header JSON could not be parsed or produced.
    #[error("header json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, OwqError>;
