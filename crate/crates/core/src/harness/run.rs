//! Replica execution: build the stream, run the continual updates, score every visited region.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelSpec};
use super::report::{Region, ReportRow, StepReport};
use crate::data::{schedule_partitions, split_indices, Dataset};
use crate::error::{GpError, Result};
use crate::fit::{FitReport, StepConfig};
use crate::likelihood::{HeterogeneousModel, LikelihoodSpec};
use crate::mogp::MultiOutputModel;
use crate::sogp::SingleOutputModel;

/// Densities below this are clamped before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Environment variable capping the number of replicas run in parallel.
pub const THREADS_ENV: &str = "CONTINUAL_GP_THREADS";

/// Mean of `−log p(y_n)` with each predictive density estimated from `n_samples` draws.
pub fn nlpd(
    likelihood: &LikelihoodSpec,
    y: &[f64],
    mean: &DVector<f64>,
    var: &DVector<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if y.is_empty() || y.len() != mean.len() || y.len() != var.len() {
        return Err(GpError::param("nlpd needs a nonempty test set with matching marginals"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let p = likelihood.predictive_density_mc_with(yi, mean[i], var[i], n_samples, &mut rng)?;
        total -= p.max(DENSITY_FLOOR).ln();
    }
    Ok(total / y.len() as f64)
}

/// One scheduled step after intersecting with the train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedStep {
    /// Training rows delivered at this step.
    pub batch: Vec<usize>,
    pub active: Vec<bool>,
    /// Test rows scored as this step's region.
    pub region_test: Vec<usize>,
}

/// The dataset, its split and the stream of steps shared by every replica.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub steps: Vec<PreparedStep>,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dataset = cfg.dataset.load(cfg.seed)?;
        Self::from_dataset(cfg, dataset)
    }

    /// Steps whose batch holds no training observation hand their test rows to
    /// the next step (or the previous one at the end of the stream).
    pub fn from_dataset(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        if dataset.n_channels() != cfg.model.n_channels() {
            return Err(GpError::Config(format!(
                "dataset has {} channels, model expects {}",
                dataset.n_channels(),
                cfg.model.n_channels()
            )));
        }
        for d in 0..dataset.n_channels() {
            let lik = cfg.model.likelihood(d);
            for (n, (&y, &m)) in dataset.y(d).iter().zip(dataset.mask(d)).enumerate() {
                if m {
                    lik.check_output(y).map_err(|e| GpError::Config(format!("row {n}, channel {d}: {e}")))?;
                }
            }
        }
        let (train, test) = split_indices(dataset.len(), cfg.test_fraction, cfg.seed.wrapping_add(1))?;
        let mut is_test = vec![false; dataset.len()];
        for &i in &test {
            is_test[i] = true;
        }
        let parts = schedule_partitions(&dataset, &cfg.schedule)?;
        let mut steps: Vec<PreparedStep> = Vec::with_capacity(parts.len());
        let mut carried: Vec<usize> = Vec::new();
        for p in parts {
            let batch: Vec<usize> = p.batch.iter().copied().filter(|&i| !is_test[i]).collect();
            carried.extend(p.region.iter().copied().filter(|&i| is_test[i]));
            let observed = (0..dataset.n_channels()).any(|d| p.active[d] && batch.iter().any(|&i| dataset.mask(d)[i]));
            if observed {
                carried.sort_unstable();
                steps.push(PreparedStep {
                    batch,
                    active: p.active,
                    region_test: std::mem::take(&mut carried),
                });
            }
        }
        match steps.last_mut() {
            Some(last) => {
                last.region_test.extend(carried);
                last.region_test.sort_unstable();
            }
            None => return Err(GpError::Config("no step receives any training observation".into())),
        }
        Ok(Prepared {
            dataset,
            train,
            test,
            steps,
        })
    }
}

enum Model {
    Single(SingleOutputModel),
    Multi(MultiOutputModel),
}

impl Model {
    fn predict(&self, d: usize, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            Model::Single(m) => m.predict(x),
            Model::Multi(m) => m.predict_channel(d, x),
        }
    }

    fn num_inducing(&self) -> usize {
        match self {
            Model::Single(m) => m.z().len(),
            Model::Multi(m) => m.num_inducing(),
        }
    }
}

/// Per-channel scores of one region at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub n_test: usize,
    pub nlpd: f64,
    pub error_rate: Option<f64>,
}

/// Predictive curve on a grid: inputs, then per channel (mean, lower, upper).
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub x: DMatrix<f64>,
    pub bands: Vec<[DVector<f64>; 3]>,
}

#[derive(Debug, Clone)]
pub struct ReplicaStep {
    /// `scores[(region, channel)]` for regions `1..=t`.
    pub scores: BTreeMap<(usize, usize), Score>,
    pub num_inducing: usize,
    pub fit: FitReport,
    pub wall_time_s: f64,
    pub curve: Option<Curve>,
}

/// Deterministic 64-bit mix of a seed with small integers.
fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
    }
    h
}

pub fn replica_seed(base: u64, replica: usize) -> u64 {
    mix(base, &[replica as u64])
}

/// Run the whole stream once with the given seed.
pub fn run_replica(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<Vec<ReplicaStep>> {
    let ds = &prep.dataset;
    let mut step_cfg: StepConfig = cfg.step.clone();
    step_cfg.seed = seed;
    step_cfg.optimizer.seed = mix(seed, &[1]);
    let mut model: Option<Model> = None;
    let mut out = Vec::with_capacity(prep.steps.len());
    let mut seen: Vec<usize> = Vec::new();
    for (k, step) in prep.steps.iter().enumerate() {
        let t = k + 1;
        let start = Instant::now();
        let (next, fit) = match (&cfg.model, model.take()) {
            (ModelSpec::Single { kernel, likelihood }, None) => {
                let (x, y) = ds.channel(0, &step.batch);
                let (m, r) = SingleOutputModel::first_step(*kernel, *likelihood, &x, &y, &step_cfg)?;
                (Model::Single(m), r)
            }
            (ModelSpec::Single { .. }, Some(Model::Single(prev))) => {
                let (x, y) = ds.channel(0, &step.batch);
                let (m, r) = prev.continual_step(&x, &y, &step_cfg)?;
                (Model::Single(m), r)
            }
            (ModelSpec::Multi { kernels, likelihoods }, None) => {
                let batch = ds.batch_for(&step.batch, &step.active)?;
                let liks = HeterogeneousModel::new(likelihoods.clone())?;
                let (m, r) = MultiOutputModel::first_step(kernels.clone(), liks, &batch, &step_cfg)?;
                (Model::Multi(m), r)
            }
            (ModelSpec::Multi { .. }, Some(Model::Multi(prev))) => {
                let batch = ds.batch_for(&step.batch, &step.active)?;
                let (m, r) = prev.continual_step_multi(&batch, &step_cfg)?;
                (Model::Multi(m), r)
            }
            _ => unreachable!("model kind is fixed by the config"),
        };
        let wall_time_s = start.elapsed().as_secs_f64();
        seen.extend_from_slice(&step.batch);

        let mut scores = BTreeMap::new();
        for (r, region) in prep.steps[..t].iter().enumerate() {
            for d in 0..ds.n_channels() {
                let (x, y) = ds.channel(d, &region.region_test);
                if y.is_empty() {
                    continue;
                }
                let lik = cfg.model.likelihood(d);
                let (m, v) = next.predict(d, &x)?;
                let value = nlpd(&lik, &y, &m, &v, cfg.metrics.nlpd_samples, mix(seed, &[2, t as u64, r as u64, d as u64]))?;
                let error_rate = if lik.is_classification() {
                    let rule = crate::math::QuadratureRule::default();
                    let p = m
                        .iter()
                        .zip(v.iter())
                        .map(|(&mi, &vi)| lik.predictive_mean(mi, vi, &rule))
                        .collect::<Result<Vec<_>>>()?;
                    Some(crate::likelihood::error_rate(&p, &y)?)
                } else {
                    None
                };
                scores.insert(
                    (r + 1, d),
                    Score {
                        n_test: y.len(),
                        nlpd: value,
                        error_rate,
                    },
                );
            }
        }
        let curve = if cfg.curves { curve(cfg, ds, &seen, &next)? } else { None };
        out.push(ReplicaStep {
            scores,
            num_inducing: next.num_inducing(),
            fit,
            wall_time_s,
            curve,
        });
        model = Some(next);
    }
    Ok(out)
}

/// Grid over the bounding box of all training inputs seen so far: 400 points
/// in one dimension, 20 × 20 in two, none above that.
fn curve(cfg: &ExperimentConfig, ds: &Dataset, seen: &[usize], model: &Model) -> Result<Option<Curve>> {
    let xs = ds.x().select_rows(seen);
    let p = xs.ncols();
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..p).map(|j| (xs.column(j).min(), xs.column(j).max())).unzip();
    let lin = |j: usize, k: usize, n: usize| {
        if n == 1 {
            lo[j]
        } else {
            lo[j] + (hi[j] - lo[j]) * k as f64 / (n - 1) as f64
        }
    };
    let grid = match p {
        1 => DMatrix::from_fn(400, 1, |i, _| lin(0, i, 400)),
        2 => DMatrix::from_fn(400, 2, |i, j| if j == 0 { lin(0, i / 20, 20) } else { lin(1, i % 20, 20) }),
        _ => return Ok(None),
    };
    let rule = crate::math::QuadratureRule::default();
    let mut bands = Vec::with_capacity(ds.n_channels());
    for d in 0..ds.n_channels() {
        let lik = cfg.model.likelihood(d);
        let (m, v) = model.predict(d, &grid)?;
        let mean = m
            .iter()
            .zip(v.iter())
            .map(|(&mi, &vi)| lik.predictive_mean(mi, vi, &rule))
            .collect::<Result<Vec<_>>>()?;
        let (lower, upper): (Vec<f64>, Vec<f64>) = m
            .iter()
            .zip(v.iter())
            .map(|(&mi, &vi)| band(&lik, mi, vi))
            .unzip();
        bands.push([
            DVector::from_vec(mean),
            DVector::from_vec(lower),
            DVector::from_vec(upper),
        ]);
    }
    Ok(Some(Curve { x: grid, bands }))
}

/// Two-standard-deviation band: on the observation for Gaussian noise, on the
/// latent mapped through the inverse link otherwise.
fn band(lik: &LikelihoodSpec, m: f64, v: f64) -> (f64, f64) {
    match *lik {
        LikelihoodSpec::GaussianFixed { sigma } => {
            let sd = (v + sigma * sigma).sqrt();
            (m - 2.0 * sd, m + 2.0 * sd)
        }
        LikelihoodSpec::Bernoulli => {
            let sd = v.sqrt();
            (crate::likelihood::sigmoid(m - 2.0 * sd), crate::likelihood::sigmoid(m + 2.0 * sd))
        }
        LikelihoodSpec::Poisson => {
            let sd = v.sqrt();
            ((m - 2.0 * sd).exp(), (m + 2.0 * sd).exp())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub replica: usize,
    pub message: String,
}

/// Aggregated output of all replicas.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub steps: Vec<StepReport>,
    pub replicas_ok: usize,
    pub aborted: Vec<Abort>,
    /// Curves of the lowest-numbered successful replica, one per step.
    pub curves: Vec<Option<Curve>>,
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// Run every replica (in parallel, capped by `CONTINUAL_GP_THREADS`) and
/// aggregate. Replicas that fail are recorded and skipped.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let prep = Prepared::new(cfg)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentOutcome> {
    let run_all = || -> Vec<Result<Vec<ReplicaStep>>> {
        (0..cfg.metrics.replicas)
            .into_par_iter()
            .map(|r| run_replica(cfg, prep, replica_seed(cfg.seed, r)))
            .collect()
    };
    let results = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| GpError::Config(format!("cannot build thread pool: {e}")))?
            .install(run_all),
        None => run_all(),
    };
    let mut ok = Vec::new();
    let mut aborted = Vec::new();
    for (replica, r) in results.into_iter().enumerate() {
        match r {
            Ok(steps) => ok.push(steps),
            Err(e) => {
                log::warn!("replica {replica} aborted: {e}");
                aborted.push(Abort {
                    replica,
                    message: e.to_string(),
                });
            }
        }
    }
    let steps = aggregate(&ok);
    let curves = ok
        .first()
        .map(|s| s.iter().map(|st| st.curve.clone()).collect())
        .unwrap_or_default();
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        steps,
        replicas_ok: ok.len(),
        aborted,
        curves,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt_mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    match v {
        Some(v) if !v.is_empty() => {
            let (m, s) = mean_std(&v);
            (Some(m), Some(s))
        }
        _ => (None, None),
    }
}

/// Per-replica global scores of one step and channel: `(sum over regions, pooled mean, pooled ER, n)`.
fn globals(step: &ReplicaStep, d: usize) -> Option<(f64, f64, Option<f64>, usize)> {
    let regional: Vec<&Score> = step.scores.iter().filter(|((_, c), _)| *c == d).map(|(_, s)| s).collect();
    if regional.is_empty() {
        return None;
    }
    let n: usize = regional.iter().map(|s| s.n_test).sum();
    let sum = regional.iter().map(|s| s.nlpd).sum();
    let pooled = regional.iter().map(|s| s.nlpd * s.n_test as f64).sum::<f64>() / n as f64;
    let er = regional
        .iter()
        .map(|s| s.error_rate.map(|e| e * s.n_test as f64))
        .sum::<Option<f64>>()
        .map(|w| w / n as f64);
    Some((sum, pooled, er, n))
}

fn aggregate(replicas: &[Vec<ReplicaStep>]) -> Vec<StepReport> {
    let Some(first) = replicas.first() else {
        return Vec::new();
    };
    let n_channels = first
        .iter()
        .flat_map(|s| s.scores.keys().map(|k| k.1 + 1))
        .max()
        .unwrap_or(0);
    let mut reports = Vec::with_capacity(first.len());
    for (k, step0) in first.iter().enumerate() {
        let t = k + 1;
        let mut rows = Vec::new();
        for d in 0..n_channels {
            for &(region, channel) in step0.scores.keys().filter(|key| key.1 == d) {
                let s: Vec<&Score> = replicas.iter().map(|r| &r[k].scores[&(region, channel)]).collect();
                let (nlpd_mean, nlpd_std) = mean_std(&s.iter().map(|x| x.nlpd).collect::<Vec<_>>());
                let (error_rate_mean, error_rate_std) = opt_mean_std(&s.iter().map(|x| x.error_rate).collect::<Vec<_>>());
                rows.push(ReportRow {
                    step: t,
                    region: Region::Step(region),
                    channel,
                    n_test: s[0].n_test,
                    nlpd_mean,
                    nlpd_std,
                    error_rate_mean,
                    error_rate_std,
                    num_inducing: step0.num_inducing,
                });
            }
            let g: Vec<(f64, f64, Option<f64>, usize)> = replicas.iter().filter_map(|r| globals(&r[k], d)).collect();
            if g.len() == replicas.len() {
                let n_test = g[0].3;
                let (sum_m, sum_s) = mean_std(&g.iter().map(|x| x.0).collect::<Vec<_>>());
                let (mean_m, mean_s) = mean_std(&g.iter().map(|x| x.1).collect::<Vec<_>>());
                let (er_m, er_s) = opt_mean_std(&g.iter().map(|x| x.2).collect::<Vec<_>>());
                for (region, m, s, em, es) in [
                    (Region::GlobalSum, sum_m, sum_s, None, None),
                    (Region::GlobalMean, mean_m, mean_s, er_m, er_s),
                ] {
                    rows.push(ReportRow {
                        step: t,
                        region,
                        channel: d,
                        n_test,
                        nlpd_mean: m,
                        nlpd_std: s,
                        error_rate_mean: em,
                        error_rate_std: es,
                        num_inducing: step0.num_inducing,
                    });
                }
            }
        }
        let wall = replicas.iter().map(|r| r[k].wall_time_s).sum::<f64>() / replicas.len() as f64;
        reports.push(StepReport {
            step: t,
            num_inducing: step0.num_inducing,
            elbo_trace: step0.fit.trace.clone(),
            final_elbo: mean_std(&replicas.iter().map(|r| r[k].fit.final_value).collect::<Vec<_>>()).0,
            wall_time_s: wall,
            rows,
        });
    }
    reports
}
