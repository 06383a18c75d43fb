//! Error taxonomy shared across the crate.
//!
//! Validation problems (bad shapes, bad config, mismatched checkpoints) map to
//! exit code 1 at the CLI; runtime failures (I/O, non-finite numerics, aborted
//! episodes) map to exit code 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer geometry is inconsistent with what an operation needs.
    #[error("shape error: {0}")]
    Shape(String),

    /// A run configuration is missing keys or holds out-of-range values.
    #[error("config error: {0}")]
    Config(String),

    /// A backward pass was handed state that does not match its forward pass.
    #[error("state error: {0}")]
    State(String),

    /// A vector handed to a similarity measure has near-zero spread; the
    /// message names the offending argument.
    #[error("degenerate vector: {0}")]
    Degenerate(String),

    /// Optimization produced a non-finite value; the message names the layer.
    #[error("training error: {0}")]
    Training(String),

    /// Episode construction could not satisfy its constraints.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A crop request fell outside the image or was too small to resample.
    #[error("crop error: {0}")]
    Crop(String),

    /// A checkpoint manifest disagrees with its blob or with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Config(_)
            | Error::Sampling(_)
            | Error::Crop(_)
            | Error::Checkpoint(_) => 1,
            Error::State(_)
            | Error::Degenerate(_)
            | Error::Training(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
