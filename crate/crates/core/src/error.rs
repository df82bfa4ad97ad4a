use alloc::string::String;

/// Errors surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A value outside its admissible domain (class index, timestep, schedule bound...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Tensor or token shapes that do not fit together.
    #[error("shape error: {0}")]
    Shape(String),
    /// A sequence or buffer shorter than required.
    #[error("length error: need {needed}, got {got}")]
    Length { needed: usize, got: usize },
    /// A loss or parameter turned NaN/inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;
