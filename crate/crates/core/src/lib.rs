//! Bayesian encoder-decoder segmentation with Monte Carlo dropout.

pub mod autograd;
pub mod bayes;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
