//! Inducing sets, Cholesky-parameterized variational Gaussians, posterior
//! snapshots and the continual-prior reconstruction.
//!
//! The continual prior over new inducing outputs `u*` on `Z_new` is the old
//! variational posterior pushed through the conditional GP under the old
//! hyperparameters:
//!
//! ```text
//! mean = K*u Kuu⁻¹ μ_old
//! cov  = K** + K*u Kuu⁻¹ (S_old − Kuu) Kuu⁻¹ K*uᵀ
//! ```
//!
//! with `Kuu` built on `Z_old`. It is the only memory a continual step has of
//! earlier batches.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::math::linalg::{cholesky_with_jitter, symmetrize, CholeskyFactor, DEFAULT_JITTER};
use crate::math::Kernel;

/// Rows closer than this (Euclidean) to an old inducing input trigger a warning.
pub const PROXIMITY_WARNING: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    z: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(GpError::param("inducing set must contain at least one point"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GpError::param("inducing inputs must be finite"));
        }
        Ok(InducingSet { z })
    }

    pub fn from_points(points: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(GpError::param("point buffer is not a multiple of the input dimension"));
        }
        Self::new(DMatrix::from_row_slice(points.len() / dim, dim, points))
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Errors if any row equals a row of `other` exactly; warns on near-coincidence.
    pub fn check_disjoint(&self, other: &InducingSet) -> Result<()> {
        for i in 0..self.len() {
            for j in 0..other.len() {
                let d2: f64 = self
                    .z
                    .row(i)
                    .iter()
                    .zip(other.z.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 == 0.0 {
                    return Err(GpError::param(format!(
                        "new inducing input {i} coincides with old inducing input {j}"
                    )));
                }
                if d2.sqrt() < PROXIMITY_WARNING {
                    log::warn!("new inducing input {i} is within {PROXIMITY_WARNING} of old input {j}");
                }
            }
        }
        Ok(())
    }
}

/// `q(u) = N(μ, L Lᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVariational {
    pub mu: DVector<f64>,
    /// Lower triangular; the strictly upper part is kept at zero.
    pub l: DMatrix<f64>,
}

impl GaussianVariational {
    pub fn new(mu: DVector<f64>, l: DMatrix<f64>) -> Result<Self> {
        let m = mu.len();
        if l.shape() != (m, m) {
            return Err(GpError::param(format!(
                "variational factor is {:?}, expected {m}x{m}",
                l.shape()
            )));
        }
        for j in 1..m {
            for i in 0..j {
                if l[(i, j)] != 0.0 {
                    return Err(GpError::param("variational factor must be lower triangular"));
                }
            }
        }
        Ok(GaussianVariational { mu, l })
    }

    /// `N(mean, cov)` with `L` the (jittered) Cholesky factor of `cov`.
    pub fn from_mean_cov(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let f = cholesky_with_jitter(cov, 0.0)?;
        Self::new(mean, f.l())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn cov(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Flip columns with a negative diagonal; `L Lᵀ` is unchanged.
    pub fn canonicalize(&mut self) {
        for j in 0..self.dim() {
            if self.l[(j, j)] < 0.0 {
                let mut col = self.l.column_mut(j);
                col *= -1.0;
            }
        }
    }
}

/// Frozen state of one latent function at the end of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSnapshot {
    z: InducingSet,
    q: GaussianVariational,
    kernel: Kernel,
}

impl LatentSnapshot {
    pub fn new(z: InducingSet, q: GaussianVariational, kernel: Kernel) -> Result<Self> {
        if z.len() != q.dim() {
            return Err(GpError::param(format!(
                "snapshot has {} inducing inputs but a {}-dimensional posterior",
                z.len(),
                q.dim()
            )));
        }
        Ok(LatentSnapshot { z, q, kernel })
    }

    pub fn z(&self) -> &InducingSet {
        &self.z
    }

    pub fn q(&self) -> &GaussianVariational {
        &self.q
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }
}

/// The past learned parameters carried between steps: one entry per latent
/// function, plus the output mixing for multi-output models.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    latents: Vec<LatentSnapshot>,
    mixing: Option<DMatrix<f64>>,
}

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotFile {
    schema_version: u32,
    latents: Vec<LatentRecord>,
    mixing: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentRecord {
    #[serde(rename = "Z")]
    z: Vec<Vec<f64>>,
    mu: Vec<f64>,
    /// Row-major `M×M`.
    #[serde(rename = "L")]
    l: Vec<f64>,
    psi: Kernel,
}

impl PosteriorSnapshot {
    pub fn new(latents: Vec<LatentSnapshot>, mixing: Option<DMatrix<f64>>) -> Result<Self> {
        if latents.is_empty() {
            return Err(GpError::param("snapshot needs at least one latent function"));
        }
        if let Some(a) = &mixing {
            if a.ncols() != latents.len() {
                return Err(GpError::param("mixing matrix columns must match the latent count"));
            }
        }
        let p = latents[0].z.input_dim();
        if latents.iter().any(|l| l.z.input_dim() != p) {
            return Err(GpError::param("latent inducing sets disagree on input dimension"));
        }
        Ok(PosteriorSnapshot { latents, mixing })
    }

    pub fn single(z: InducingSet, q: GaussianVariational, kernel: Kernel) -> Result<Self> {
        Self::new(vec![LatentSnapshot::new(z, q, kernel)?], None)
    }

    pub fn latents(&self) -> &[LatentSnapshot] {
        &self.latents
    }

    pub fn mixing(&self) -> Option<&DMatrix<f64>> {
        self.mixing.as_ref()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SnapshotFile {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            latents: self
                .latents
                .iter()
                .map(|lat| LatentRecord {
                    z: rows(lat.z.z()),
                    mu: lat.q.mu.iter().copied().collect(),
                    l: rows(&lat.q.l).into_iter().flatten().collect(),
                    psi: lat.kernel,
                })
                .collect(),
            mixing: self.mixing.as_ref().map(rows),
        };
        serde_json::to_string_pretty(&file).map_err(|e| GpError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SnapshotFile =
            serde_json::from_str(text).map_err(|e| GpError::Config(format!("bad snapshot: {e}")))?;
        if file.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(GpError::Config(format!(
                "unsupported snapshot schema version {}",
                file.schema_version
            )));
        }
        let mut latents = Vec::with_capacity(file.latents.len());
        for rec in file.latents {
            let z = InducingSet::new(from_rows(&rec.z)?)?;
            let m = rec.mu.len();
            if rec.l.len() != m * m {
                return Err(GpError::Config("snapshot L has the wrong length".into()));
            }
            let q = GaussianVariational::new(
                DVector::from_vec(rec.mu),
                DMatrix::from_row_slice(m, m, &rec.l),
            )?;
            let kernel = Kernel::new(rec.psi.family, rec.psi.lengthscale, rec.psi.amplitude)?;
            latents.push(LatentSnapshot::new(z, q, kernel)?);
        }
        let mixing = file.mixing.as_deref().map(from_rows).transpose()?;
        Self::new(latents, mixing)
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(GpError::Config("ragged matrix in snapshot".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Whether the new inducing inputs may coincide with the old ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoincidencePolicy {
    #[default]
    Reject,
    /// Test mode: allows `Z_new = Z_old` to exercise identity recursions.
    Allow,
}

#[derive(Debug, Clone, Copy)]
pub struct ReconstructOptions {
    pub policy: CoincidencePolicy,
    /// Relative jitter on the old `Kuu`.
    pub jitter: f64,
    /// Shrink `S_old` onto `S_old ≤ Kuu` first, so that `q̃` is never wider
    /// than `p(u_new | ψ_old)`. A no-op for any posterior that satisfies it.
    pub cap_to_prior: bool,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            policy: CoincidencePolicy::Reject,
            jitter: DEFAULT_JITTER,
            cap_to_prior: true,
        }
    }
}

/// The continual prior `q̃(u_new | φ_old)` together with the other fixed
/// quantities a continual bound needs on `Z_new`.
#[derive(Debug, Clone)]
pub struct ContinualPrior {
    pub mean: DVector<f64>,
    /// Symmetrized covariance (without jitter).
    pub cov: DMatrix<f64>,
    pub(crate) cov_factor: CholeskyFactor,
    /// Factor of `K(Z_new, Z_new)` under the old hyperparameters, i.e. `p(u_new | ψ_old)`.
    pub(crate) old_prior_factor: CholeskyFactor,
    /// Inducing inputs the prior was built on, used to detect staleness.
    pub(crate) z_new: DMatrix<f64>,
}

impl ContinualPrior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_valid_for(&self, z_new: &InducingSet) -> bool {
        &self.z_new == z_new.z()
    }

    /// Covariance of `p(u_new | ψ_old)`, including jitter.
    pub fn old_prior_cov(&self) -> DMatrix<f64> {
        self.old_prior_factor.reconstruct()
    }
}

pub fn reconstruct_continual_prior(latent: &LatentSnapshot, z_new: &InducingSet) -> Result<ContinualPrior> {
    reconstruct_continual_prior_with(latent, z_new, ReconstructOptions::default())
}

pub fn reconstruct_continual_prior_with(
    latent: &LatentSnapshot,
    z_new: &InducingSet,
    opts: ReconstructOptions,
) -> Result<ContinualPrior> {
    if z_new.input_dim() != latent.z.input_dim() {
        return Err(GpError::param("new and old inducing inputs differ in dimension"));
    }
    if opts.policy == CoincidencePolicy::Reject {
        z_new.check_disjoint(&latent.z)?;
    }
    let k = &latent.kernel;
    let kuu = k.matrix(latent.z.z(), latent.z.z())?;
    let kuu_f = cholesky_with_jitter(&kuu, opts.jitter)?;
    let kuu_j = kuu_f.reconstruct();
    let k_su = k.matrix(z_new.z(), latent.z.z())?;
    let k_ss = k.matrix(z_new.z(), z_new.z())?;
    // P = K*u Kuu⁻¹
    let p = kuu_f.solve(&k_su.transpose()).transpose();
    let mean = &p * &latent.q.mu;
    let cov = if opts.cap_to_prior {
        // In Kuu-whitened coordinates S_old − Kuu = L (W − I) Lᵀ; cap W's spectrum at 1.
        let l = kuu_f.l();
        let a = l.solve_lower_triangular(&latent.q.cov()).ok_or_else(|| GpError::numerical("singular Kuu factor", f64::INFINITY))?;
        let w = l
            .solve_lower_triangular(&a.transpose())
            .ok_or_else(|| GpError::numerical("singular Kuu factor", f64::INFINITY))?;
        let eig = symmetrize(&w).symmetric_eigen();
        let shrink = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.min(1.0) - 1.0));
        let g = &p * &l * &eig.eigenvectors;
        symmetrize(&(&k_ss + &g * shrink * g.transpose()))
    } else {
        symmetrize(&(&k_ss + &p * (latent.q.cov() - kuu_j) * p.transpose()))
    };
    let cov_factor = cholesky_with_jitter(&cov, DEFAULT_JITTER)?;
    let old_prior_factor = cholesky_with_jitter(&k_ss, DEFAULT_JITTER)?;
    Ok(ContinualPrior {
        mean,
        cov,
        cov_factor,
        old_prior_factor,
        z_new: z_new.z().clone(),
    })
}

/// Per-point marginals of `q(f) = ∫ p(f|u) q(u) du`.
pub fn marginal_posterior(
    q: &GaussianVariational,
    z: &InducingSet,
    x: &DMatrix<f64>,
    kernel: &Kernel,
) -> Result<(DVector<f64>, DVector<f64>)> {
    marginal_posterior_with_jitter(q, z, x, kernel, DEFAULT_JITTER)
}

pub fn marginal_posterior_with_jitter(
    q: &GaussianVariational,
    z: &InducingSet,
    x: &DMatrix<f64>,
    kernel: &Kernel,
    jitter: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let proj = crate::bound::LatentProjection::new(kernel, z, q, x, jitter)?;
    let var = proj.var.map(|v| v.max(0.0));
    Ok((proj.mean, var))
}

/// `M` inputs evenly covering `[lo, hi]` (a grid when the input dimension is
/// above one), each moved by a seeded uniform jitter of `1e-3·range`, and
/// re-jittered until none coincides with `z_old`.
pub fn init_inducing(
    lo: &[f64],
    hi: &[f64],
    m: usize,
    z_old: Option<&InducingSet>,
    seed: u64,
) -> Result<InducingSet> {
    let p = lo.len();
    if p == 0 || hi.len() != p {
        return Err(GpError::param("domain bounds must be nonempty and of equal length"));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(GpError::param("domain requires lo < hi componentwise"));
    }
    if m == 0 {
        return Err(GpError::param("need at least one inducing point"));
    }
    let side = if p == 1 {
        m
    } else {
        let mut s = (m as f64).powf(1.0 / p as f64).round() as usize;
        while s.pow(p as u32) < m {
            s += 1;
        }
        s.max(1)
    };
    let axis = |d: usize, i: usize| -> f64 {
        if side == 1 {
            0.5 * (lo[d] + hi[d])
        } else {
            lo[d] + (hi[d] - lo[d]) * i as f64 / (side - 1) as f64
        }
    };
    let total = side.pow(p as u32);
    // Evenly thin a full grid down to m points.
    let picks: Vec<usize> = if total == m {
        (0..m).collect()
    } else {
        (0..m)
            .map(|i| if m == 1 { total / 2 } else { i * (total - 1) / (m - 1) })
            .collect()
    };
    let mut z = DMatrix::zeros(m, p);
    for (row, &flat) in picks.iter().enumerate() {
        let mut rem = flat;
        for d in 0..p {
            z[(row, d)] = axis(d, rem % side);
            rem /= side;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = z.clone();
    let jitter_row = |z: &mut DMatrix<f64>, row: usize, rng: &mut ChaCha8Rng| {
        for d in 0..p {
            let mag = 1e-3 * (hi[d] - lo[d]);
            z[(row, d)] = base[(row, d)] + rng.random_range(-mag..mag);
        }
    };
    for row in 0..m {
        jitter_row(&mut z, row, &mut rng);
    }
    if let Some(old) = z_old {
        if old.input_dim() != p {
            return Err(GpError::param("old inducing set has a different input dimension"));
        }
        for row in 0..m {
            for _ in 0..1000 {
                let clash = (0..old.len()).any(|j| {
                    let d2: f64 = (0..p).map(|d| (z[(row, d)] - old.z[(j, d)]).powi(2)).sum();
                    d2.sqrt() < PROXIMITY_WARNING
                });
                if !clash {
                    break;
                }
                jitter_row(&mut z, row, &mut rng);
            }
        }
    }
    InducingSet::new(z)
}

/// How many inducing points to use at (1-based) step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum GrowthRule {
    Constant { m: usize },
    /// `M_t = t·base`.
    Linear { base: usize },
    /// `M_t = initial + (t − 1)·step`.
    Affine { initial: usize, step: usize },
    /// `M_1 = initial`, `M_t = M_{t−1} + 2t`.
    Additive { initial: usize },
    /// `M_t = initial·2^{t−1}`.
    Doubling { initial: usize },
    /// Grid with `initial_side + (t − 1)·step` points per input dimension.
    GridSide { initial_side: usize, step: usize },
    /// `M_t = initial + add·⌊(t − 1)/every⌋`.
    Periodic { initial: usize, every: usize, add: usize },
}

impl GrowthRule {
    pub fn size_at(&self, t: usize, input_dim: usize) -> usize {
        let t = t.max(1);
        let m = match *self {
            GrowthRule::Constant { m } => m,
            GrowthRule::Linear { base } => t * base,
            GrowthRule::Affine { initial, step } => initial + (t - 1) * step,
            GrowthRule::Additive { initial } => initial + (2..=t).map(|s| 2 * s).sum::<usize>(),
            GrowthRule::Doubling { initial } => initial << (t - 1).min(20),
            GrowthRule::GridSide { initial_side, step } => {
                (initial_side + (t - 1) * step).pow(input_dim.max(1) as u32)
            }
            GrowthRule::Periodic { initial, every, add } => initial + add * ((t - 1) / every.max(1)),
        };
        m.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::linalg::min_eigenvalue;
    use approx::assert_relative_eq;

    fn rbf() -> Kernel {
        Kernel::rbf(1.0, 1.0).unwrap()
    }

    /// Direct evaluation of the continual-prior formulas with explicit inverses.
    fn oracle_prior(
        k: &Kernel,
        z_old: &DMatrix<f64>,
        mu: &DVector<f64>,
        s: &DMatrix<f64>,
        z_new: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let kuu = k.matrix(z_old, z_old).unwrap();
        let inv = kuu.clone().try_inverse().unwrap();
        let ksu = k.matrix(z_new, z_old).unwrap();
        let kss = k.matrix(z_new, z_new).unwrap();
        let mean = &ksu * &inv * mu;
        let cov = &kss + &ksu * &inv * (s - &kuu) * &inv * ksu.transpose();
        (mean, cov)
    }

    #[test]
    fn small_instance_matches_direct_formula() {
        let z_old = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let z_new = DMatrix::from_row_slice(1, 1, &[0.4]);
        let mu = DVector::from_column_slice(&[1.0, -1.0]);
        let s = DMatrix::identity(2, 2);
        let snap = LatentSnapshot::new(
            InducingSet::new(z_old.clone()).unwrap(),
            GaussianVariational::new(mu.clone(), DMatrix::identity(2, 2)).unwrap(),
            rbf(),
        )
        .unwrap();
        let opts = ReconstructOptions {
            jitter: 0.0,
            cap_to_prior: false,
            ..Default::default()
        };
        let prior = reconstruct_continual_prior_with(&snap, &InducingSet::new(z_new.clone()).unwrap(), opts).unwrap();
        let (m, c) = oracle_prior(&rbf(), &z_old, &mu, &s, &z_new);
        assert_relative_eq!(prior.mean, m, epsilon = 1e-12);
        assert_relative_eq!(prior.cov, c, epsilon = 1e-12);
        // Frozen values from the direct formula.
        assert_relative_eq!(prior.mean[0], 0.223_260_432_213_615_97, epsilon = 1e-9);
        assert_relative_eq!(prior.cov[(0, 0)], 0.651_809_602_162_666_3, epsilon = 1e-9);
    }

    #[test]
    fn identity_when_new_equals_old() {
        let z = InducingSet::from_points(&[0.0, 0.7, 2.0], 1).unwrap();
        let l = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.1, 0.4, 0.0, -0.2, 0.05, 0.3]);
        let q = GaussianVariational::new(DVector::from_column_slice(&[0.3, -0.2, 0.9]), l).unwrap();
        let snap = LatentSnapshot::new(z.clone(), q.clone(), rbf()).unwrap();
        assert!(reconstruct_continual_prior(&snap, &z).is_err());
        let opts = ReconstructOptions {
            policy: CoincidencePolicy::Allow,
            jitter: 0.0,
            cap_to_prior: false,
        };
        let prior = reconstruct_continual_prior_with(&snap, &z, opts).unwrap();
        assert_relative_eq!(prior.mean, q.mu, epsilon = 1e-9);
        assert_relative_eq!(prior.cov, q.cov(), epsilon = 1e-9);
    }

    #[test]
    fn cap_bounds_prior_by_old_kernel() {
        let z_old = InducingSet::from_points(&[0.0, 0.3, 0.6], 1).unwrap();
        let z_new = InducingSet::from_points(&[0.1, 0.45, 0.9, 1.4], 1).unwrap();
        let k = rbf();
        let kss = k.matrix(z_new.z(), z_new.z()).unwrap();
        let kuu = k.matrix(z_old.z(), z_old.z()).unwrap();
        // Wider than the prior: S = 3 Kuu.
        let wide = GaussianVariational::new(DVector::zeros(3), kuu.clone().cholesky().unwrap().l() * 3f64.sqrt()).unwrap();
        let snap = LatentSnapshot::new(z_old.clone(), wide, k).unwrap();
        let capped = reconstruct_continual_prior(&snap, &z_new).unwrap();
        let gap = (&kss - &capped.cov).symmetric_eigen().eigenvalues.min();
        assert!(gap > -1e-8, "min eigenvalue of K** - cov is {gap}");
        let raw = ReconstructOptions { cap_to_prior: false, ..Default::default() };
        let uncapped = reconstruct_continual_prior_with(&snap, &z_new, raw).unwrap();
        assert!((&kss - &uncapped.cov).symmetric_eigen().eigenvalues.min() < -1e-3);
        // Narrower than the prior: S = Kuu / 2 is left alone.
        let narrow = GaussianVariational::new(DVector::from_element(3, 0.4), kuu.cholesky().unwrap().l() * 0.5f64.sqrt()).unwrap();
        let snap = LatentSnapshot::new(z_old, narrow, k).unwrap();
        let a = reconstruct_continual_prior(&snap, &z_new).unwrap();
        let b = reconstruct_continual_prior_with(&snap, &z_new, raw).unwrap();
        assert_relative_eq!(a.cov, b.cov, epsilon = 1e-10);
        assert_relative_eq!(a.mean, b.mean, epsilon = 1e-12);
    }

    #[test]
    fn far_away_reverts_to_prior() {
        let z = InducingSet::from_points(&[0.0, 0.5], 1).unwrap();
        let q = GaussianVariational::new(DVector::from_column_slice(&[2.0, -1.0]), DMatrix::identity(2, 2) * 0.1)
            .unwrap();
        let snap = LatentSnapshot::new(z, q, rbf()).unwrap();
        let far = InducingSet::from_points(&[100.0, 101.0], 1).unwrap();
        let prior = reconstruct_continual_prior(&snap, &far).unwrap();
        assert!(prior.mean.amax() < 1e-12);
        assert_relative_eq!(prior.cov, rbf().matrix(far.z(), far.z()).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(GaussianVariational::new(DVector::zeros(2), DMatrix::identity(3, 3)).is_err());
        let upper = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianVariational::new(DVector::zeros(2), upper).is_err());
        let z = InducingSet::from_points(&[0.0, 1.0], 1).unwrap();
        let q = GaussianVariational::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(LatentSnapshot::new(z, q, rbf()).is_err());
    }

    #[test]
    fn marginals_at_inducing_inputs_interpolate() {
        let z = InducingSet::from_points(&[0.0, 0.6, 1.5], 1).unwrap();
        let l = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.1, 0.4, 0.0, -0.2, 0.05, 0.3]);
        let q = GaussianVariational::new(DVector::from_column_slice(&[0.3, -0.2, 0.9]), l).unwrap();
        let (m, v) = marginal_posterior_with_jitter(&q, &z, z.z(), &rbf(), 0.0).unwrap();
        assert_relative_eq!(m, q.mu, epsilon = 1e-8);
        assert_relative_eq!(v, q.cov().diagonal(), epsilon = 1e-8);
    }

    #[test]
    fn marginals_equal_prior_when_q_is_prior() {
        let k = Kernel::rbf(0.4, 1.3).unwrap();
        let z = InducingSet::from_points(&[0.0, 0.6, 1.5], 1).unwrap();
        let kuu = k.matrix(z.z(), z.z()).unwrap();
        let q = GaussianVariational::from_mean_cov(DVector::zeros(3), &kuu).unwrap();
        let x = DMatrix::from_row_slice(4, 1, &[-0.3, 0.2, 0.9, 50.0]);
        let (m, v) = marginal_posterior(&q, &z, &x, &k).unwrap();
        assert!(m.amax() < 1e-12);
        for vi in v.iter() {
            assert_relative_eq!(*vi, k.variance(), epsilon = 1e-5);
        }
    }

    #[test]
    fn marginals_match_direct_formula() {
        let k = Kernel::matern32(0.7, 0.9).unwrap();
        let z = InducingSet::from_points(&[0.1, 0.4, 0.5, 1.0, 0.8, -0.3], 2).unwrap();
        let l = DMatrix::from_row_slice(3, 3, &[0.6, 0.0, 0.0, 0.2, 0.5, 0.0, -0.1, 0.3, 0.4]);
        let q = GaussianVariational::new(DVector::from_column_slice(&[0.5, -1.0, 0.2]), l).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.3, 0.9, 1.4, -0.2]);
        let (m, v) = marginal_posterior_with_jitter(&q, &z, &x, &k, 0.0).unwrap();
        let kuu = k.matrix(z.z(), z.z()).unwrap();
        let inv = kuu.clone().try_inverse().unwrap();
        let kfu = k.matrix(&x, z.z()).unwrap();
        let mean = &kfu * &inv * &q.mu;
        let cov = k.matrix(&x, &x).unwrap() + &kfu * &inv * (q.cov() - &kuu) * &inv * kfu.transpose();
        assert_relative_eq!(m, mean, epsilon = 1e-10);
        assert_relative_eq!(v, cov.diagonal(), epsilon = 1e-10);
    }

    #[test]
    fn init_inducing_examples() {
        let z = init_inducing(&[0.0], &[1.0], 3, None, 7).unwrap();
        for (i, target) in [0.0, 0.5, 1.0].iter().enumerate() {
            assert!((z.z()[(i, 0)] - target).abs() <= 1e-3 + 1e-15);
        }
        let one = init_inducing(&[0.0], &[1.0], 1, None, 7).unwrap();
        assert!((one.z()[(0, 0)] - 0.5).abs() <= 1e-3);
        let old = InducingSet::from_points(&[one.z()[(0, 0)]], 1).unwrap();
        let again = init_inducing(&[0.0], &[1.0], 1, Some(&old), 7).unwrap();
        assert_ne!(again.z()[(0, 0)], old.z()[(0, 0)]);
        assert!(again.check_disjoint(&old).is_ok());

        let grid = init_inducing(&[0.0, 0.0], &[1.0, 2.0], 9, None, 1).unwrap();
        assert_eq!(grid.len(), 9);
        assert!((grid.z()[(8, 1)] - 2.0).abs() <= 2e-3);
        assert!(init_inducing(&[1.0], &[0.0], 3, None, 0).is_err());
        assert!(init_inducing(&[0.0], &[1.0], 0, None, 0).is_err());
    }

    #[test]
    fn growth_presets() {
        let lin = GrowthRule::Linear { base: 3 };
        assert_eq!((1..=4).map(|t| lin.size_at(t, 1)).collect::<Vec<_>>(), vec![3, 6, 9, 12]);
        let add = GrowthRule::Additive { initial: 4 };
        assert_eq!((1..=4).map(|t| add.size_at(t, 1)).collect::<Vec<_>>(), vec![4, 8, 14, 22]);
        let dbl = GrowthRule::Doubling { initial: 20 };
        assert_eq!(dbl.size_at(3, 1), 80);
        assert_eq!(GrowthRule::GridSide { initial_side: 3, step: 1 }.size_at(2, 2), 16);
        let per = GrowthRule::Periodic { initial: 15, every: 25, add: 1 };
        assert_eq!(per.size_at(25, 1), 15);
        assert_eq!(per.size_at(26, 1), 16);
        assert_eq!(GrowthRule::Affine { initial: 4, step: 2 }.size_at(10, 1), 22);
    }

    #[test]
    fn snapshot_json_round_trip() {
        let z = InducingSet::from_points(&[0.1, 0.2, 0.3, 0.4], 2).unwrap();
        let q = GaussianVariational::new(
            DVector::from_column_slice(&[0.5, -0.25]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.7]),
        )
        .unwrap();
        let snap = PosteriorSnapshot::new(
            vec![LatentSnapshot::new(z, q, Kernel::matern32(0.3, 2.0).unwrap()).unwrap()],
            Some(DMatrix::from_row_slice(2, 1, &[0.5, -1.5])),
        )
        .unwrap();
        let text = snap.to_json().unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert_eq!(PosteriorSnapshot::from_json(&text).unwrap(), snap);
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(PosteriorSnapshot::from_json(&bumped).is_err());
    }

    #[test]
    fn continual_prior_is_psd_for_random_snapshots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let m_old = rng.random_range(1..=8);
            let m_new = rng.random_range(1..=12);
            let zo: Vec<f64> = (0..m_old).map(|_| rng.random_range(0.0..1.0)).collect();
            let zn: Vec<f64> = (0..m_new).map(|_| rng.random_range(-0.5..1.5)).collect();
            let mut l = DMatrix::zeros(m_old, m_old);
            for i in 0..m_old {
                for j in 0..=i {
                    l[(i, j)] = rng.random_range(-0.5..0.5);
                }
                l[(i, i)] = rng.random_range(0.05..1.0);
            }
            let mu = DVector::from_fn(m_old, |_, _| rng.random_range(-1.0..1.0));
            let k = Kernel::rbf(rng.random_range(0.1..1.0), rng.random_range(0.5..2.0)).unwrap();
            let snap = LatentSnapshot::new(
                InducingSet::from_points(&zo, 1).unwrap(),
                GaussianVariational::new(mu, l).unwrap(),
                k,
            )
            .unwrap();
            let prior = reconstruct_continual_prior(&snap, &InducingSet::from_points(&zn, 1).unwrap()).unwrap();
            assert!(min_eigenvalue(&prior.cov) >= -1e-8);
        }
    }
}
