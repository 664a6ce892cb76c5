//! Numeric substrate: kernels, jittered Cholesky, Gaussian KL, Gauss–Hermite quadrature.

pub mod kernel;
pub mod kl;
pub mod linalg;
pub mod quadrature;

pub use kernel::{Kernel, KernelFamily};
pub use kl::gaussian_kl;
pub use linalg::{cholesky_with_jitter, CholeskyFactor};
pub use quadrature::{gauss_hermite_expectation, QuadratureRule};
