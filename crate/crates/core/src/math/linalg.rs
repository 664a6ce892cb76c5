//! Cholesky factorization with jitter escalation and small dense helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpError, Result};

/// Relative jitter applied when the caller does not ask for a specific one.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Relative jitter at which escalation gives up.
pub const JITTER_CAP: f64 = 1e-1;

/// Lower Cholesky factor of `A + jitter_used·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    pub jitter_used: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        symmetrize(&inv)
    }

    /// `ln |A + jitter·I|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// The factored matrix, `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.l();
        &l * l.transpose()
    }
}

/// Factor a symmetric matrix, adding `jitter·mean(diag(A))·I` when needed.
///
/// The first attempt uses `base_jitter` (relative to the mean diagonal); on
/// failure the relative jitter grows ×10 (starting from [`DEFAULT_JITTER`] when
/// `base_jitter` is zero) until [`JITTER_CAP`].
pub fn cholesky_with_jitter(a: &DMatrix<f64>, base_jitter: f64) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(GpError::param(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GpError::numerical("matrix has non-finite entries", f64::INFINITY));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(GpError::param(format!("matrix is not symmetric (max asymmetry {asym:.3e})")));
    }
    let n = a.nrows();
    let mut mean_diag = if n == 0 { 1.0 } else { a.diagonal().mean() };
    if !(mean_diag > 0.0) {
        mean_diag = 1.0;
    }
    let mut rel = base_jitter.max(0.0);
    loop {
        let jitter = rel * mean_diag;
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            if chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok(CholeskyFactor {
                    chol,
                    jitter_used: jitter,
                });
            }
        }
        rel = if rel == 0.0 { DEFAULT_JITTER } else { rel * 10.0 };
        if rel > JITTER_CAP * (1.0 + 1e-12) {
            return Err(GpError::numerical(
                format!("cholesky failed at jitter cap for {n}x{n} matrix"),
                condition_estimate(a),
            ));
        }
    }
}

/// Ratio of extreme absolute eigenvalues, for diagnostics only.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(*v))
}

/// Zero the strictly upper triangle.
pub fn lower_triangle(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for j in 1..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// `(A B)_{nn}` for every row `n`, without forming the product.
pub fn diag_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |n, _| a.row(n).dot(&b.column(n).transpose()))
}
