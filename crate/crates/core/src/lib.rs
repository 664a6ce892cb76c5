//! Continual variational inference for sparse Gaussian processes.
//!
//! The model never revisits past batches: after each step the learned
//! variational posterior is frozen into a [`variational::PosteriorSnapshot`]
//! and pushed through the conditional GP onto the next step's inducing inputs,
//! where it acts as the prior memory of everything seen so far.

pub mod bound;
pub mod data;
pub mod error;
pub mod fit;
pub mod harness;
pub mod likelihood;
pub mod math;
pub mod mogp;
pub mod optimize;
pub mod sogp;
pub mod variational;

pub use error::{GpError, Result};
