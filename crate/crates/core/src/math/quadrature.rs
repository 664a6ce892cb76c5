//! Gauss–Hermite quadrature for one-dimensional Gaussian expectations.

use std::f64::consts::PI;

use crate::error::{GpError, Result};

pub const DEFAULT_NODES: usize = 20;

/// Nodes and weights for `∫ e^{-x²} g(x) dx ≈ Σ w_i g(x_i)`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule::gauss_hermite(DEFAULT_NODES).expect("default order is valid")
    }
}

impl QuadratureRule {
    /// Physicists' Gauss–Hermite rule of order `n`, roots found by Newton
    /// iteration on the orthonormal Hermite recurrence.
    pub fn gauss_hermite(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(GpError::param("quadrature needs at least 2 nodes"));
        }
        let pim4 = PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let half = n.div_ceil(2);
        let mut z = 0.0;
        for i in 0..half {
            z = match i {
                0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        // Ascending order.
        nodes.reverse();
        weights.reverse();
        Ok(QuadratureRule { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Raw weights, summing to √π.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights divided by √π, summing to one.
    pub fn normalized_weights(&self) -> impl Iterator<Item = f64> + '_ {
        let c = PI.sqrt().recip();
        self.weights.iter().map(move |w| w * c)
    }

    /// `E_{N(f | m, v)}[g(f)]` by the change of variables `f = m + √(2v)·x`.
    pub fn expectation<G: FnMut(f64) -> f64>(&self, mut g: G, m: f64, v: f64) -> Result<f64> {
        if !(v >= 0.0) {
            return Err(GpError::param(format!("variance must be nonnegative, got {v}")));
        }
        let scale = (2.0 * v).sqrt();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(self.normalized_weights()) {
            let val = g(m + scale * x);
            if !val.is_finite() {
                return Err(GpError::numerical("non-finite integrand in quadrature", f64::NAN));
            }
            acc += w * val;
        }
        Ok(acc)
    }
}

/// Free-function form of [`QuadratureRule::expectation`].
pub fn gauss_hermite_expectation<G: FnMut(f64) -> f64>(
    g: G,
    m: f64,
    v: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    rule.expectation(g, m, v)
}
