//! Maximization of bounds over flat parameter vectors.
//!
//! Two methods: a full-batch limited-memory quasi-Newton ascent with Armijo
//! backtracking, and a per-coordinate adaptive stochastic method (Adadelta)
//! driven by seeded minibatches. [`vem_loop`] alternates either method over
//! two parameter blocks.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{GpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    FullBatchQn,
    StochasticAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub minibatch_size: Option<usize>,
    /// Adadelta decay.
    pub rho: f64,
    /// Adadelta conditioner.
    pub epsilon: f64,
    /// Multiplier on the Adadelta update.
    pub step_rate: f64,
    /// Curvature pairs kept by the quasi-Newton method.
    pub memory: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::FullBatchQn,
            max_iters: 100,
            grad_tol: 1e-5,
            minibatch_size: None,
            rho: 0.95,
            epsilon: 1e-6,
            step_rate: 1.0,
            memory: 10,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(GpError::Config("grad_tol must be positive".into()));
        }
        if self.method == Method::StochasticAdaptive {
            match self.minibatch_size {
                Some(b) if b >= 1 => {}
                _ => return Err(GpError::Config("stochastic method requires minibatch_size ≥ 1".into())),
            }
            if !(self.rho > 0.0 && self.rho < 1.0) || !(self.epsilon > 0.0) || !(self.step_rate > 0.0) {
                return Err(GpError::Config("adadelta needs 0 < rho < 1, epsilon > 0, step_rate > 0".into()));
            }
        }
        if self.memory == 0 {
            return Err(GpError::Config("quasi-Newton memory must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VemSchedule {
    pub rounds: usize,
    pub e_iters: usize,
    pub m_iters: usize,
}

impl Default for VemSchedule {
    fn default() -> Self {
        VemSchedule {
            rounds: 4,
            e_iters: 100,
            m_iters: 100,
        }
    }
}

impl VemSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.e_iters == 0 || self.m_iters == 0 {
            return Err(GpError::Config("VEM rounds and iteration counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub converged: bool,
    pub iters: usize,
    /// Objective value after every accepted iterate, starting at `x0`.
    pub trace: Vec<f64>,
}

/// Objective callback: value and gradient at `x`, restricted to the given
/// minibatch of data indices when one is passed.
pub trait Objective {
    fn eval(&mut self, x: &DVector<f64>, batch: Option<&[usize]>) -> Result<(f64, DVector<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&DVector<f64>, Option<&[usize]>) -> Result<(f64, DVector<f64>)>,
{
    fn eval(&mut self, x: &DVector<f64>, batch: Option<&[usize]>) -> Result<(f64, DVector<f64>)> {
        self(x, batch)
    }
}

/// Maximize `objective` from `x0`. `n_data` is the number of data points
/// minibatches are drawn from (ignored by the full-batch method).
pub fn maximize<O: Objective + ?Sized>(
    objective: &mut O,
    x0: &DVector<f64>,
    n_data: usize,
    cfg: &OptimizerConfig,
) -> Result<OptimResult> {
    cfg.validate()?;
    match cfg.method {
        Method::FullBatchQn => lbfgs(objective, x0, cfg),
        Method::StochasticAdaptive => adadelta(objective, x0, n_data, cfg),
    }
}

fn finite_eval<O: Objective + ?Sized>(
    objective: &mut O,
    x: &DVector<f64>,
    batch: Option<&[usize]>,
) -> Option<(f64, DVector<f64>)> {
    match objective.eval(x, batch) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|e| e.is_finite()) => Some((v, g)),
        _ => None,
    }
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

/// Two-loop recursion on the minimization problem `h = −f`.
fn lbfgs<O: Objective + ?Sized>(objective: &mut O, x0: &DVector<f64>, cfg: &OptimizerConfig) -> Result<OptimResult> {
    let (f0, g0) = objective.eval(x0, None)?;
    if !f0.is_finite() || g0.iter().any(|e| !e.is_finite()) {
        return Err(GpError::numerical("objective is not finite at the starting point", f64::NAN));
    }
    let mut x = x0.clone();
    let mut h = -f0;
    let mut g = -g0;
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut trace = vec![f0];
    let mut converged = false;
    let mut iters = 0;

    while iters < cfg.max_iters {
        if g.amax() < cfg.grad_tol {
            converged = true;
            break;
        }
        let mut d = two_loop(&g, &pairs);
        let mut slope = d.dot(&g);
        if !(slope < 0.0) {
            pairs.clear();
            d = -&g;
            slope = d.dot(&g);
        }
        // First step (or after a reset) is scaled so the largest move is at most 1.
        let mut step = if pairs.is_empty() { (1.0 / d.amax()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = &x + &d * step;
            if let Some((fv, gv)) = finite_eval(objective, &trial, None) {
                if -fv <= h + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, -fv, -gv));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, h_new, g_new)) = accepted else {
            if pairs.is_empty() {
                log::debug!("line search failed along steepest descent after {iters} iterations");
                break;
            }
            pairs.clear();
            continue;
        };
        iters += 1;
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, yv, 1.0 / sy));
        }
        x = x_new;
        h = h_new;
        g = g_new;
        trace.push(-h);
    }
    if !converged && g.amax() < cfg.grad_tol {
        converged = true;
    }
    Ok(OptimResult {
        x,
        value: -h,
        converged,
        iters,
        trace,
    })
}

fn two_loop(g: &DVector<f64>, pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// Adadelta ascent over seeded, reshuffled-per-epoch minibatches.
fn adadelta<O: Objective + ?Sized>(
    objective: &mut O,
    x0: &DVector<f64>,
    n_data: usize,
    cfg: &OptimizerConfig,
) -> Result<OptimResult> {
    if n_data == 0 {
        return Err(GpError::param("stochastic optimization needs at least one data point"));
    }
    let b = cfg.minibatch_size.unwrap_or(n_data).clamp(1, n_data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_data).collect();
    let mut cursor = n_data;

    let (f0, _) = objective.eval(x0, None)?;
    if !f0.is_finite() {
        return Err(GpError::numerical("objective is not finite at the starting point", f64::NAN));
    }
    let n = x0.len();
    let mut x = x0.clone();
    let mut gms: DVector<f64> = DVector::zeros(n);
    let mut sms: DVector<f64> = DVector::zeros(n);
    let mut trace = vec![f0];
    let mut best = (f0, x.clone());
    let mut iters = 0;
    let mut failures = 0;

    while iters < cfg.max_iters {
        if cursor + b > n_data {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + b];
        cursor += b;
        let Some((_, g)) = finite_eval(objective, &x, Some(batch)) else {
            failures += 1;
            if failures > MAX_HALVINGS {
                log::warn!("adadelta aborted after repeated non-finite gradients");
                break;
            }
            continue;
        };
        iters += 1;
        let rho = cfg.rho;
        let eps = cfg.epsilon;
        gms.zip_apply(&g, |m, gi| *m = rho * *m + (1.0 - rho) * gi * gi);
        let step = DVector::from_fn(n, |i, _| ((sms[i] + eps).sqrt() / (gms[i] + eps).sqrt()) * g[i]);
        sms.zip_apply(&step, |m, si| *m = rho * *m + (1.0 - rho) * si * si);
        let mut scale = cfg.step_rate;
        let mut moved = false;
        for _ in 0..MAX_HALVINGS {
            let trial = &x + &step * scale;
            if trial.iter().all(|v| v.is_finite()) {
                x = trial;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
        if iters % n_data.div_ceil(b) == 0 || iters == cfg.max_iters {
            if let Some((fv, _)) = finite_eval(objective, &x, None) {
                trace.push(fv);
                if fv > best.0 {
                    best = (fv, x.clone());
                }
            }
        }
    }
    let value = finite_eval(objective, &x, None).map(|(v, _)| v);
    let (x, value) = match value {
        Some(v) => (x, v),
        None => (best.1, best.0),
    };
    Ok(OptimResult {
        x,
        value,
        converged: false,
        iters,
        trace,
    })
}

/// Result of a block-coordinate ascent.
#[derive(Debug, Clone)]
pub struct VemResult {
    pub x: DVector<f64>,
    pub value: f64,
    /// Joint objective at the start and after every round.
    pub round_values: Vec<f64>,
    pub converged: bool,
}

/// Alternate maximization over `e_block` (variational parameters) and
/// `m_block` (hyperparameters), each a list of indices into `x0`. With
/// `m_iters == 0` the M-phase is skipped.
pub fn vem_loop<O: Objective + ?Sized>(
    objective: &mut O,
    x0: &DVector<f64>,
    e_block: &[usize],
    m_block: &[usize],
    n_data: usize,
    schedule: &VemSchedule,
    cfg: &OptimizerConfig,
) -> Result<VemResult> {
    let mut x = x0.clone();
    let (f0, _) = objective.eval(&x, None)?;
    let mut round_values = vec![f0];
    let mut converged = true;
    for round in 0..schedule.rounds {
        for (block, iters) in [(e_block, schedule.e_iters), (m_block, schedule.m_iters)] {
            if block.is_empty() || iters == 0 {
                continue;
            }
            let sub_cfg = OptimizerConfig {
                max_iters: iters,
                seed: cfg.seed.wrapping_add(round as u64),
                ..cfg.clone()
            };
            let base = x.clone();
            let mut sub = |s: &DVector<f64>, batch: Option<&[usize]>| -> Result<(f64, DVector<f64>)> {
                let mut full = base.clone();
                for (k, &i) in block.iter().enumerate() {
                    full[i] = s[k];
                }
                let (v, g) = objective.eval(&full, batch)?;
                Ok((v, DVector::from_iterator(block.len(), block.iter().map(|&i| g[i]))))
            };
            let s0 = DVector::from_iterator(block.len(), block.iter().map(|&i| x[i]));
            let res = maximize(&mut sub, &s0, n_data, &sub_cfg)?;
            converged &= res.converged;
            for (k, &i) in block.iter().enumerate() {
                x[i] = res.x[k];
            }
        }
        let (v, _) = objective.eval(&x, None)?;
        round_values.push(v);
    }
    let value = *round_values.last().expect("at least the initial value");
    Ok(VemResult {
        x,
        value,
        round_values,
        converged,
    })
}
