//! Forget-me-not regularization for variational autoencoders.
//!
//! An inference critic scores every `(x_i, z_j)` pair in a minibatch and is
//! trained, jointly with the VAE, to pick out the corresponding pairs. Its
//! InfoNCE objective is added to the ELBO, which keeps the mutual
//! information between observations and latents from collapsing.

pub mod critics;
pub mod data;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result, TensorError};
