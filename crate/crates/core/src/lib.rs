//! Query-conditioned music source separation at desk scale.
//!
//! A variational Query-net encodes an example of the wanted source into a
//! latent vector; an AdaIN-conditioned U-Net turns that vector and a mixture
//! spectrogram into a sigmoid mask. Everything runs on a small in-crate
//! autodiff engine in 64-bit floats.

pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod latent;
pub mod model;
pub mod tensor;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("latent dimension mismatch: expected {expected}, found {found}")]
    LatentDim { expected: usize, found: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("iteration {iteration}: non-finite {what}")]
    NonFiniteLoss { iteration: u64, what: String },
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
}

pub type Result<T> = std::result::Result<T, Error>;
