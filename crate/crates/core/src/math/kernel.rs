//! Stationary covariance functions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    /// Matérn with smoothness ν = 3/2.
    Matern32,
}

/// An isotropic stationary kernel with a lengthscale and an amplitude.
///
/// `k(x, x) = amplitude²` for every `x`. Hyperparameters are optimized in
/// log-space, see [`Kernel::log_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kernel {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub amplitude: f64,
}

/// Derivatives of a Gram matrix w.r.t. the log-hyperparameters.
pub struct GramGrads {
    pub d_log_lengthscale: DMatrix<f64>,
    pub d_log_amplitude: DMatrix<f64>,
}

impl Kernel {
    pub fn new(family: KernelFamily, lengthscale: f64, amplitude: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(GpError::param(format!("lengthscale must be positive, got {lengthscale}")));
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(GpError::param(format!("amplitude must be positive, got {amplitude}")));
        }
        Ok(Kernel {
            family,
            lengthscale,
            amplitude,
        })
    }

    pub fn rbf(lengthscale: f64, amplitude: f64) -> Result<Self> {
        Self::new(KernelFamily::Rbf, lengthscale, amplitude)
    }

    pub fn matern32(lengthscale: f64, amplitude: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern32, lengthscale, amplitude)
    }

    pub fn variance(&self) -> f64 {
        self.amplitude * self.amplitude
    }

    /// `[ln ℓ, ln σ_a]`.
    pub fn log_params(&self) -> [f64; 2] {
        [self.lengthscale.ln(), self.amplitude.ln()]
    }

    pub fn with_log_params(&self, log_params: [f64; 2]) -> Self {
        Kernel {
            family: self.family,
            lengthscale: log_params[0].exp(),
            amplitude: log_params[1].exp(),
        }
    }

    fn eval_sq_dist(&self, sq_dist: f64) -> f64 {
        let var = self.variance();
        match self.family {
            KernelFamily::Rbf => var * (-0.5 * sq_dist / (self.lengthscale * self.lengthscale)).exp(),
            KernelFamily::Matern32 => {
                let s = 3f64.sqrt() * sq_dist.sqrt() / self.lengthscale;
                var * (1.0 + s) * (-s).exp()
            }
        }
    }

    /// `(k, dk/d ln ℓ)` at a squared distance.
    fn eval_with_lengthscale_grad(&self, sq_dist: f64) -> (f64, f64) {
        let var = self.variance();
        match self.family {
            KernelFamily::Rbf => {
                let r2 = sq_dist / (self.lengthscale * self.lengthscale);
                let k = var * (-0.5 * r2).exp();
                (k, k * r2)
            }
            KernelFamily::Matern32 => {
                let s = 3f64.sqrt() * sq_dist.sqrt() / self.lengthscale;
                let e = (-s).exp();
                (var * (1.0 + s) * e, var * s * s * e)
            }
        }
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        self.eval_sq_dist(sq_dist(x.iter().copied(), x2.iter().copied()))
    }

    /// Gram matrix with entry `(i, j) = k(x_i, x2_j)`; inputs are stored one point per row.
    pub fn matrix(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dims(x, x2)?;
        Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
            self.eval_sq_dist(row_sq_dist(x, i, x2, j))
        }))
    }

    /// Gram matrix together with its derivatives w.r.t. `ln ℓ` and `ln σ_a`.
    pub fn matrix_with_grads(
        &self,
        x: &DMatrix<f64>,
        x2: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, GramGrads)> {
        check_dims(x, x2)?;
        let (n, m) = (x.nrows(), x2.nrows());
        let mut k = DMatrix::zeros(n, m);
        let mut dl = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let (kij, dlij) = self.eval_with_lengthscale_grad(row_sq_dist(x, i, x2, j));
                k[(i, j)] = kij;
                dl[(i, j)] = dlij;
            }
        }
        let da = &k * 2.0;
        Ok((
            k,
            GramGrads {
                d_log_lengthscale: dl,
                d_log_amplitude: da,
            },
        ))
    }
}

fn check_dims(x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != x2.ncols() {
        return Err(GpError::param(format!(
            "input dimension mismatch: {} vs {}",
            x.ncols(),
            x2.ncols()
        )));
    }
    if x.iter().chain(x2.iter()).any(|v| !v.is_finite()) {
        return Err(GpError::param("non-finite kernel input"));
    }
    Ok(())
}

fn row_sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|d| (a[(i, d)] - b[(j, d)]).powi(2)).sum()
}

fn sq_dist(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}
