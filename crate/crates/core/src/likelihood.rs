//! Per-point likelihoods, their variational expectations and Monte Carlo
//! predictive densities.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::math::QuadratureRule;

/// Below this variance `∂/∂v` falls back to `½E[∂²log p/∂f²]`.
const SMALL_VARIANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum LikelihoodSpec {
    /// Gaussian noise with a fixed, never optimized standard deviation.
    GaussianFixed { sigma: f64 },
    /// Binary outputs in {0, 1} with a logistic link.
    Bernoulli,
    /// Count outputs with an exponential link.
    Poisson,
}

/// One likelihood per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneousModel {
    pub per_channel: Vec<LikelihoodSpec>,
}

impl HeterogeneousModel {
    pub fn new(per_channel: Vec<LikelihoodSpec>) -> Result<Self> {
        if per_channel.is_empty() {
            return Err(GpError::param("heterogeneous model needs at least one channel"));
        }
        for spec in &per_channel {
            spec.validate()?;
        }
        Ok(HeterogeneousModel { per_channel })
    }

    pub fn len(&self) -> usize {
        self.per_channel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_channel.is_empty()
    }
}

/// Value of `E_{N(f|m,v)}[log p(y|f)]` and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarExp {
    pub value: f64,
    pub dm: f64,
    pub dv: f64,
}

impl LikelihoodSpec {
    pub fn gaussian(sigma: f64) -> Self {
        LikelihoodSpec::GaussianFixed { sigma }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LikelihoodSpec::GaussianFixed { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(GpError::param(format!("gaussian noise must be positive, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LikelihoodSpec::Bernoulli)
    }

    pub fn check_output(&self, y: f64) -> Result<()> {
        let ok = match self {
            LikelihoodSpec::GaussianFixed { .. } => y.is_finite(),
            LikelihoodSpec::Bernoulli => y == 0.0 || y == 1.0,
            LikelihoodSpec::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(GpError::param(format!("output {y} is invalid for {self:?}")))
        }
    }

    /// `log p(y | f)`.
    pub fn log_density(&self, y: f64, f: f64) -> f64 {
        match *self {
            LikelihoodSpec::GaussianFixed { sigma } => {
                let r = y - f;
                -0.5 * (2.0 * PI * sigma * sigma).ln() - 0.5 * r * r / (sigma * sigma)
            }
            LikelihoodSpec::Bernoulli => y * f - softplus(f),
            LikelihoodSpec::Poisson => y * f - f.exp() - ln_factorial(y),
        }
    }

    /// First and second derivative of `log p(y | f)` in `f`.
    fn log_density_derivs(&self, y: f64, f: f64) -> (f64, f64) {
        match *self {
            LikelihoodSpec::GaussianFixed { sigma } => ((y - f) / (sigma * sigma), -1.0 / (sigma * sigma)),
            LikelihoodSpec::Bernoulli => {
                let s = sigmoid(f);
                (y - s, -s * (1.0 - s))
            }
            LikelihoodSpec::Poisson => {
                let e = f.exp();
                (y - e, -e)
            }
        }
    }

    /// `E_{N(f|m,v)}[log p(y|f)]` with derivatives w.r.t. `m` and `v`.
    ///
    /// Gaussian noise uses the closed form; Bernoulli and Poisson use
    /// Gauss–Hermite quadrature, and the derivatives are those of the
    /// quadrature sum itself. A zero variance evaluates the point mass directly.
    pub fn variational_expectation(&self, y: f64, m: f64, v: f64, rule: &QuadratureRule) -> Result<VarExp> {
        self.check_output(y)?;
        if !(v >= 0.0) || !m.is_finite() {
            return Err(GpError::param(format!("invalid marginal (m={m}, v={v})")));
        }
        if let LikelihoodSpec::GaussianFixed { sigma } = *self {
            let s2 = sigma * sigma;
            let r = y - m;
            return Ok(VarExp {
                value: -0.5 * (2.0 * PI * s2).ln() - 0.5 * (r * r + v) / s2,
                dm: r / s2,
                dv: -0.5 / s2,
            });
        }
        if v == 0.0 {
            let (d1, d2) = self.log_density_derivs(y, m);
            return Ok(VarExp {
                value: self.log_density(y, m),
                dm: d1,
                dv: 0.5 * d2,
            });
        }
        let value = rule.expectation(|f| self.log_density(y, f), m, v)?;
        let dm = rule.expectation(|f| self.log_density_derivs(y, f).0, m, v)?;
        // E[g'(f)(f − m)] / 2v is the exact derivative of the quadrature sum;
        // it equals ½E[g''] under the true Gaussian but not under a finite rule.
        let dv = if v < SMALL_VARIANCE {
            0.5 * rule.expectation(|f| self.log_density_derivs(y, f).1, m, v)?
        } else {
            rule.expectation(|f| self.log_density_derivs(y, f).0 * (f - m), m, v)? / (2.0 * v)
        };
        Ok(VarExp { value, dm, dv })
    }

    /// Predictive probability of a binary label (`p(y = 1)`), or the predictive
    /// mean for other families, under `f ~ N(m, v)`; estimated with quadrature.
    pub fn predictive_mean(&self, m: f64, v: f64, rule: &QuadratureRule) -> Result<f64> {
        match self {
            LikelihoodSpec::GaussianFixed { .. } => Ok(m),
            LikelihoodSpec::Bernoulli => rule.expectation(sigmoid, m, v.max(0.0)),
            LikelihoodSpec::Poisson => Ok((m + 0.5 * v.max(0.0)).exp()),
        }
    }

    /// Monte Carlo estimate of `p(y) = E_{N(f|m,v)}[p(y|f)]`, reproducible from `seed`.
    pub fn predictive_density_mc(&self, y: f64, m: f64, v: f64, n_samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.predictive_density_mc_with(y, m, v, n_samples, &mut rng)
    }

    pub fn predictive_density_mc_with<R: Rng + ?Sized>(
        &self,
        y: f64,
        m: f64,
        v: f64,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_samples == 0 {
            return Err(GpError::param("n_samples must be at least 1"));
        }
        self.check_output(y)?;
        let sd = v.max(0.0).sqrt();
        let mut acc = 0.0;
        for _ in 0..n_samples {
            let eps: f64 = rng.sample(StandardNormal);
            acc += self.log_density(y, m + sd * eps).exp();
        }
        Ok(acc / n_samples as f64)
    }
}

/// Closed form of the Poisson variational expectation, `y·m − e^{m+v/2} − ln y!`.
pub fn poisson_expectation_closed_form(y: f64, m: f64, v: f64) -> VarExp {
    let e = (m + 0.5 * v).exp();
    VarExp {
        value: y * m - e - ln_factorial(y),
        dm: y - e,
        dv: -0.5 * e,
    }
}

/// Fraction of labels disagreeing with `p ≥ 0.5 → 1`.
pub fn error_rate(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(GpError::param("predictions and labels differ in length"));
    }
    if predictions.is_empty() {
        return Err(GpError::param("error rate of an empty set"));
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p >= 0.5) != (**y >= 0.5))
        .count();
    Ok(wrong as f64 / predictions.len() as f64)
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^f)` without overflow.
pub fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

fn ln_factorial(y: f64) -> f64 {
    if y < 2.0 {
        return 0.0;
    }
    if y < 256.0 {
        return (2..=y as u64).map(|k| (k as f64).ln()).sum();
    }
    // Stirling series for ln Γ(y + 1).
    let n = y;
    n * n.ln() - n + 0.5 * (2.0 * PI * n).ln() + 1.0 / (12.0 * n) - 1.0 / (360.0 * n.powi(3))
        + 1.0 / (1260.0 * n.powi(5))
}
