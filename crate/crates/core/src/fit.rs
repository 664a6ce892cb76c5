//! Pieces shared by the single- and multi-output step drivers: step
//! configuration, visited-domain tracking, parameter packing and the fit loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::math::Kernel;
use crate::optimize::{maximize, vem_loop, Objective, OptimizerConfig, VemSchedule};
use crate::variational::{GaussianVariational, GrowthRule};

/// How kernel hyperparameters are set at the start of each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum HyperInit {
    /// Start from the previous step's optimized values.
    #[default]
    Carry,
    /// Reset to fixed values every step.
    Fixed { lengthscale: f64, amplitude: f64 },
}

impl HyperInit {
    pub fn apply(&self, previous: &Kernel) -> Result<Kernel> {
        match *self {
            HyperInit::Carry => Ok(*previous),
            HyperInit::Fixed { lengthscale, amplitude } => Kernel::new(previous.family, lengthscale, amplitude),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub growth: GrowthRule,
    #[serde(default)]
    pub hyper_init: HyperInit,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Alternate variational and hyperparameter blocks instead of a joint fit.
    #[serde(default)]
    pub vem: Option<VemSchedule>,
    /// Multi-output models only: how the mixing matrix starts each step.
    #[serde(default)]
    pub mixing_init: MixingInit,
    /// Seed for inducing-input placement, mixing draws and stochastic optimization.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixingInit {
    /// Fresh i.i.d. standard normal coefficients every step.
    #[default]
    Random,
    /// Start from the previous step's coefficients.
    Carry,
}

impl StepConfig {
    pub fn new(growth: GrowthRule) -> Self {
        StepConfig {
            growth,
            hyper_init: HyperInit::Carry,
            optimizer: OptimizerConfig::default(),
            vem: None,
            mixing_init: MixingInit::Random,
            seed: 0,
        }
    }

    pub(crate) fn step_seed(&self, step: usize) -> u64 {
        self.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Outcome of optimizing one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub converged: bool,
    pub iters: usize,
    pub initial_value: f64,
    pub final_value: f64,
    /// Bound value per accepted iterate (joint fit) or per VEM round.
    pub trace: Vec<f64>,
}

/// Axis-aligned bounding box of every input seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn from_inputs(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(GpError::param("cannot take the domain of an empty input set"));
        }
        let p = x.ncols();
        let lo = (0..p).map(|d| x.column(d).min()).collect();
        let hi = (0..p).map(|d| x.column(d).max()).collect();
        Ok(Domain { lo, hi })
    }

    pub fn include(&mut self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Ok(());
        }
        if x.ncols() != self.lo.len() {
            return Err(GpError::param("input dimension changed between batches"));
        }
        for d in 0..x.ncols() {
            self.lo[d] = self.lo[d].min(x.column(d).min());
            self.hi[d] = self.hi[d].max(x.column(d).max());
        }
        Ok(())
    }

    /// Bounds with zero-width dimensions widened so that `lo < hi`.
    pub fn padded(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.lo.clone();
        let mut hi = self.hi.clone();
        for d in 0..lo.len() {
            if !(hi[d] > lo[d]) {
                let pad = 0.5 * lo[d].abs().max(1.0);
                lo[d] -= pad;
                hi[d] += pad;
            }
        }
        (lo, hi)
    }
}

pub(crate) fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Append `μ` then the lower triangle of `L`, row by row.
pub(crate) fn pack_variational(q: &GaussianVariational, out: &mut Vec<f64>) {
    out.extend(q.mu.iter());
    pack_lower(&q.l, out);
}

pub(crate) fn pack_lower(l: &DMatrix<f64>, out: &mut Vec<f64>) {
    for i in 0..l.nrows() {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
}

pub(crate) fn unpack_variational(m: usize, flat: &[f64]) -> Result<GaussianVariational> {
    let mu = DVector::from_column_slice(&flat[..m]);
    GaussianVariational::new(mu, unpack_lower(m, &flat[m..]))
}

pub(crate) fn unpack_kernel(template: &Kernel, flat: &[f64]) -> Result<Kernel> {
    let k = template.with_log_params([flat[0], flat[1]]);
    Kernel::new(k.family, k.lengthscale, k.amplitude)
}

/// Coordinates in which the optimizer sees each variational block: `μ = μ₀ + P a`
/// and `L = P B`, with `P` the Cholesky factor of the block's starting `q`.
/// The bound is unchanged; only its conditioning improves.
pub(crate) struct Whitening {
    blocks: Vec<(DVector<f64>, DMatrix<f64>)>,
}

impl Whitening {
    pub(crate) fn new(start: &[&GaussianVariational]) -> Self {
        Whitening {
            blocks: start.iter().map(|q| (q.mu.clone(), q.l.clone())).collect(),
        }
    }

    fn len(&self) -> usize {
        self.blocks.iter().map(|(mu, _)| mu.len() + tri_len(mu.len())).sum()
    }

    /// Whitened coordinates of the starting point: `a = 0`, `B = I`.
    fn origin(&self, theta0: &DVector<f64>) -> DVector<f64> {
        let mut phi = theta0.clone();
        let mut off = 0;
        for (mu, _) in &self.blocks {
            let m = mu.len();
            phi.rows_mut(off, m).fill(0.0);
            let mut k = off + m;
            for i in 0..m {
                for j in 0..=i {
                    phi[k] = if i == j { 1.0 } else { 0.0 };
                    k += 1;
                }
            }
            off += m + tri_len(m);
        }
        phi
    }

    fn to_model(&self, phi: &DVector<f64>) -> DVector<f64> {
        let mut theta = phi.clone();
        let mut off = 0;
        for (mu0, p) in &self.blocks {
            let m = mu0.len();
            let a = phi.rows(off, m);
            theta.rows_mut(off, m).copy_from(&(mu0 + p * a));
            let b = unpack_lower(m, &phi.as_slice()[off + m..]);
            let mut flat = Vec::with_capacity(tri_len(m));
            pack_lower(&(p * b), &mut flat);
            theta.rows_mut(off + m, tri_len(m)).copy_from_slice(&flat);
            off += m + tri_len(m);
        }
        theta
    }

    fn pull_back(&self, g: &DVector<f64>) -> DVector<f64> {
        let mut out = g.clone();
        let mut off = 0;
        for (mu0, p) in &self.blocks {
            let m = mu0.len();
            let ga = p.transpose() * g.rows(off, m);
            out.rows_mut(off, m).copy_from(&ga);
            let gl = unpack_lower(m, &g.as_slice()[off + m..]);
            let mut flat = Vec::with_capacity(tri_len(m));
            pack_lower(&(p.transpose() * gl), &mut flat);
            out.rows_mut(off + m, tri_len(m)).copy_from_slice(&flat);
            off += m + tri_len(m);
        }
        out
    }
}

fn unpack_lower(m: usize, flat: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in 0..=i {
            l[(i, j)] = flat[k];
            k += 1;
        }
    }
    l
}

/// Maximize `objective` from `x0`, where the leading variational entries (the
/// blocks of `whitening`) form the E-block and the rest the hyperparameter block.
pub(crate) fn run_fit<O: Objective>(
    objective: &mut O,
    x0: &DVector<f64>,
    whitening: &Whitening,
    n_data: usize,
    opt: &OptimizerConfig,
    vem: Option<&VemSchedule>,
) -> Result<(DVector<f64>, FitReport)> {
    let e_len = whitening.len();
    let phi0 = whitening.origin(x0);
    let mut inner = |phi: &DVector<f64>, batch: Option<&[usize]>| -> Result<(f64, DVector<f64>)> {
        let (v, g) = objective.eval(&whitening.to_model(phi), batch)?;
        Ok((v, whitening.pull_back(&g)))
    };
    let (phi, report) = match vem {
        Some(schedule) => {
            let e: Vec<usize> = (0..e_len).collect();
            let m: Vec<usize> = (e_len..x0.len()).collect();
            let r = vem_loop(&mut inner, &phi0, &e, &m, n_data, schedule, opt)?;
            let report = FitReport {
                converged: r.converged,
                iters: schedule.rounds,
                initial_value: r.round_values[0],
                final_value: r.value,
                trace: r.round_values,
            };
            (r.x, report)
        }
        None => {
            let r = maximize(&mut inner, &phi0, n_data, opt)?;
            let report = FitReport {
                converged: r.converged,
                iters: r.iters,
                initial_value: r.trace[0],
                final_value: r.value,
                trace: r.trace,
            };
            (r.x, report)
        }
    };
    Ok((whitening.to_model(&phi), report))
}

/// Flip any column of `L` with a negative diagonal.
pub(crate) fn canonical(mut q: GaussianVariational) -> GaussianVariational {
    q.canonicalize();
    q
}
