use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("frame count {frames} is not divisible by the downsampling ratio {ratio}")]
    Framing { frames: usize, ratio: usize },

    #[error("wrong model mode: {0}")]
    Mode(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error(transparent)]
    Bitstream(#[from] BitstreamError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("audio file: {0}")]
    Audio(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures when reading a packed token stream.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated bitstream: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("token index {index} out of range for codebook size {size}")]
    IndexOutOfRange { index: u32, size: u32 },
    #[error("inconsistent header: {0}")]
    Header(String),
}
