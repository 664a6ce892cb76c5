//! Closed-form KL divergence between multivariate Gaussians.

use nalgebra::{DMatrix, DVector};

use super::linalg::{cholesky_with_jitter, lower_triangle, CholeskyFactor};
use crate::error::{GpError, Result};

/// `KL(N(μ0, S0) ‖ N(μ1, S1))`.
pub fn gaussian_kl(
    mu0: &DVector<f64>,
    s0: &DMatrix<f64>,
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
) -> Result<f64> {
    let k = mu0.len();
    if s0.shape() != (k, k) || mu1.len() != k || s1.shape() != (k, k) {
        return Err(GpError::param("gaussian_kl: dimension mismatch"));
    }
    let c0 = cholesky_with_jitter(s0, 0.0)?;
    let c1 = cholesky_with_jitter(s1, 0.0)?;
    let trace = c1.solve(s0).trace();
    let delta = mu1 - mu0;
    let maha = delta.dot(&c1.solve_vec(&delta));
    Ok(0.5 * (trace + maha - k as f64 + c1.log_det() - c0.log_det()))
}

/// KL of a Cholesky-parameterized `q = N(μ, L Lᵀ)` against a fixed Gaussian,
/// with gradients w.r.t. both sides.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub value: f64,
    pub d_mu: DVector<f64>,
    /// Lower-triangular gradient w.r.t. `L`.
    pub d_l: DMatrix<f64>,
    /// Gradient w.r.t. the reference covariance (as an unconstrained matrix).
    pub d_ref_cov: DMatrix<f64>,
    pub d_ref_mean: DVector<f64>,
}

/// `KL(N(μ, L Lᵀ) ‖ N(m, C))` where `C` is given by its factor.
///
/// `ln|L Lᵀ|` uses `ln|L_ii|`, so a negative diagonal entry is tolerated.
pub fn kl_q_to_ref(
    mu: &DVector<f64>,
    l: &DMatrix<f64>,
    ref_mean: &DVector<f64>,
    ref_chol: &CholeskyFactor,
) -> KlGrad {
    let m = mu.len();
    let c_inv = ref_chol.inverse();
    let s = l * l.transpose();
    let delta = mu - ref_mean;
    let c_inv_delta = &c_inv * &delta;
    let trace = (&c_inv * &s).trace();
    let maha = delta.dot(&c_inv_delta);
    let log_det_q: f64 = 2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
    let value = 0.5 * (trace + maha - m as f64 + ref_chol.log_det() - log_det_q);

    let mut d_l = &c_inv * l;
    for i in 0..m {
        d_l[(i, i)] -= 1.0 / l[(i, i)];
    }
    let d_l = lower_triangle(&d_l);

    let c_inv_s_c_inv = &c_inv * &s * &c_inv;
    let outer = &c_inv_delta * c_inv_delta.transpose();
    let d_ref_cov = (&c_inv - c_inv_s_c_inv - outer) * 0.5;

    KlGrad {
        value,
        d_mu: c_inv_delta.clone(),
        d_l,
        d_ref_cov,
        d_ref_mean: -c_inv_delta,
    }
}
