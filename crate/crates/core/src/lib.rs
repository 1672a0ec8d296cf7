//! Bitemporal change detection with an exchanging dual encoder-decoder,
//! half-convolution units and temporal fusion attention, built on a small
//! reverse-mode differentiation core.

pub mod backbone;
pub mod config;
pub mod data;
mod error;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, TensorError, Var};
