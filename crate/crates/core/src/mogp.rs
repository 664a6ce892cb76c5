//! Multi-output continual GP with a linear model of coregionalization.
//!
//! Each output is `f_d = Σ_q a_{q,d} u_q` over `Q` independent latent GPs,
//! each with its own kernel, inducing inputs and variational posterior. The
//! prior covariance over all inducing outputs is block-diagonal in `q`, so the
//! model carries `Q` parallel continual priors. Channels missing from a batch
//! contribute no expectation terms; the KL terms never see channels at all.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bound::{self, BoundTerms, ChannelInput, LatentInput};
use crate::error::{GpError, Result};
use crate::fit::{
    canonical, pack_variational, run_fit, Whitening, tri_len, unpack_kernel, unpack_variational, Domain, FitReport, MixingInit,
    StepConfig,
};
use crate::likelihood::HeterogeneousModel;
use crate::math::linalg::{cholesky_with_jitter, DEFAULT_JITTER};
use crate::math::{Kernel, QuadratureRule};
use crate::sogp::flatten_grad;
use crate::variational::{
    init_inducing, reconstruct_continual_prior, ContinualPrior, GaussianVariational, InducingSet, LatentSnapshot,
    PosteriorSnapshot,
};

/// Mixing coefficients stored `D×Q`: entry `(d, q)` is `a_{q,d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmcMixing {
    a: DMatrix<f64>,
}

impl LmcMixing {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(GpError::param("mixing needs at least one channel and one latent"));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(GpError::param("mixing coefficients must be finite"));
        }
        Ok(LmcMixing { a })
    }

    /// Standard normal coefficients.
    pub fn random(d: usize, q: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(DMatrix::from_fn(d, q, |_, _| StandardNormal.sample(&mut rng)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn n_outputs(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_latents(&self) -> usize {
        self.a.ncols()
    }

    /// Rank-one coregionalization matrix `B_q = a_q a_qᵀ` (`D×D`).
    pub fn coregionalization(&self, q: usize) -> DMatrix<f64> {
        let col = self.a.column(q);
        &col * col.transpose()
    }
}

/// Horizontal blocks `a_{q,d} K_q(X, Z_q)`, `q = 1..Q`.
pub fn cross_cov_f_u(
    mixing: &LmcMixing,
    kernels: &[Kernel],
    d: usize,
    x: &DMatrix<f64>,
    zs: &[InducingSet],
) -> Result<DMatrix<f64>> {
    let n_q = mixing.n_latents();
    if kernels.len() != n_q || zs.len() != n_q {
        return Err(GpError::param("need one kernel and one inducing set per latent function"));
    }
    if d >= mixing.n_outputs() {
        return Err(GpError::param(format!("channel {d} out of range")));
    }
    let widths: Vec<usize> = zs.iter().map(|z| z.len()).collect();
    let mut out = DMatrix::zeros(x.nrows(), widths.iter().sum());
    let mut col = 0;
    for q in 0..n_q {
        let block = kernels[q].matrix(x, zs[q].z())? * mixing.a[(d, q)];
        out.view_mut((0, col), (x.nrows(), widths[q])).copy_from(&block);
        col += widths[q];
    }
    Ok(out)
}

/// `blockdiag(K_q(Z_q, Z_q))`.
pub fn assemble_kuu(kernels: &[Kernel], zs: &[InducingSet]) -> Result<DMatrix<f64>> {
    if kernels.len() != zs.len() {
        return Err(GpError::param("need one kernel per inducing set"));
    }
    let total: usize = zs.iter().map(|z| z.len()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut off = 0;
    for (k, z) in kernels.iter().zip(zs) {
        let m = z.len();
        out.view_mut((off, off), (m, m)).copy_from(&k.matrix(z.z(), z.z())?);
        off += m;
    }
    Ok(out)
}

/// Observations per channel; `None` marks a channel absent from the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBatch {
    pub channels: Vec<Option<(DMatrix<f64>, Vec<f64>)>>,
}

impl ChannelBatch {
    pub fn new(channels: Vec<Option<(DMatrix<f64>, Vec<f64>)>>) -> Result<Self> {
        let mut any = false;
        for (d, ch) in channels.iter().enumerate() {
            if let Some((x, y)) = ch {
                if x.nrows() != y.len() {
                    return Err(GpError::param(format!("channel {d}: {} inputs, {} outputs", x.nrows(), y.len())));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(GpError::param(format!("channel {d} has non-finite inputs")));
                }
                any |= x.nrows() > 0;
            }
        }
        if !any {
            return Err(GpError::param("batch has no observations in any channel"));
        }
        Ok(ChannelBatch { channels })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn is_present(&self, d: usize) -> bool {
        matches!(self.channels.get(d), Some(Some((x, _))) if x.nrows() > 0)
    }

    pub fn n_total(&self) -> usize {
        self.channels.iter().flatten().map(|(x, _)| x.nrows()).sum()
    }

    fn input_dim(&self) -> usize {
        self.channels.iter().flatten().map(|(x, _)| x.ncols()).next().unwrap_or(0)
    }

    /// Subset given by pooled indices (channel-major order).
    fn select(&self, pooled: &[usize]) -> ChannelBatch {
        let mut offsets = Vec::with_capacity(self.channels.len());
        let mut off = 0;
        for ch in &self.channels {
            offsets.push(off);
            off += ch.as_ref().map_or(0, |(x, _)| x.nrows());
        }
        let channels = self
            .channels
            .iter()
            .enumerate()
            .map(|(d, ch)| {
                let (x, y) = ch.as_ref()?;
                let rows: Vec<usize> = pooled
                    .iter()
                    .filter(|&&i| i >= offsets[d] && i < offsets[d] + x.nrows())
                    .map(|&i| i - offsets[d])
                    .collect();
                if rows.is_empty() {
                    return None;
                }
                Some((x.select_rows(&rows), rows.iter().map(|&r| y[r]).collect()))
            })
            .collect();
        ChannelBatch { channels }
    }
}

#[derive(Debug, Clone)]
struct LatentState {
    kernel: Kernel,
    z: InducingSet,
    q: GaussianVariational,
    prior: Option<ContinualPrior>,
}

#[derive(Debug, Clone)]
pub struct MultiElbo {
    pub value: f64,
    pub terms: BoundTerms,
    /// Flat gradient in [`MultiOutputModel::params`] layout.
    pub grad: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiOutputModel {
    latents: Vec<LatentState>,
    mixing: LmcMixing,
    likelihoods: HeterogeneousModel,
    snapshot: Option<PosteriorSnapshot>,
    rule: QuadratureRule,
    domain: Option<Domain>,
    step: usize,
}

impl MultiOutputModel {
    /// Untrained model with every `q_q` at its prior.
    pub fn new(
        kernels: Vec<Kernel>,
        zs: Vec<InducingSet>,
        mixing: LmcMixing,
        likelihoods: HeterogeneousModel,
    ) -> Result<Self> {
        let n_q = mixing.n_latents();
        if kernels.len() != n_q || zs.len() != n_q {
            return Err(GpError::param("need one kernel and one inducing set per latent function"));
        }
        if likelihoods.len() != mixing.n_outputs() {
            return Err(GpError::param(format!(
                "{} likelihoods for {} outputs",
                likelihoods.len(),
                mixing.n_outputs()
            )));
        }
        let p = zs[0].input_dim();
        if zs.iter().any(|z| z.input_dim() != p) {
            return Err(GpError::param("inducing sets disagree on input dimension"));
        }
        let latents = kernels
            .into_iter()
            .zip(zs)
            .map(|(kernel, z)| {
                let kuu = kernel.matrix(z.z(), z.z())?;
                let l = cholesky_with_jitter(&kuu, DEFAULT_JITTER)?.l();
                let q = GaussianVariational::new(DVector::zeros(z.len()), l)?;
                Ok(LatentState { kernel, z, q, prior: None })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiOutputModel {
            latents,
            mixing,
            likelihoods,
            snapshot: None,
            rule: QuadratureRule::default(),
            domain: None,
            step: 0,
        })
    }

    pub fn with_variationals(mut self, qs: Vec<GaussianVariational>) -> Result<Self> {
        if qs.len() != self.latents.len() {
            return Err(GpError::param("one variational distribution per latent required"));
        }
        for (lat, q) in self.latents.iter_mut().zip(qs) {
            if q.dim() != lat.z.len() {
                return Err(GpError::param("variational dimension does not match its inducing set"));
            }
            lat.q = q;
        }
        Ok(self)
    }

    /// Attach a snapshot and build one continual prior per latent.
    pub fn with_snapshot(mut self, snapshot: PosteriorSnapshot) -> Result<Self> {
        if snapshot.latents().len() != self.latents.len() {
            return Err(GpError::param("snapshot latent count differs from the model"));
        }
        for (lat, old) in self.latents.iter_mut().zip(snapshot.latents()) {
            lat.prior = Some(reconstruct_continual_prior(old, &lat.z)?);
        }
        self.snapshot = Some(snapshot);
        Ok(self)
    }

    pub fn n_outputs(&self) -> usize {
        self.mixing.n_outputs()
    }

    pub fn n_latents(&self) -> usize {
        self.latents.len()
    }

    pub fn mixing(&self) -> &LmcMixing {
        &self.mixing
    }

    pub fn likelihoods(&self) -> &HeterogeneousModel {
        &self.likelihoods
    }

    pub fn kernels(&self) -> Vec<Kernel> {
        self.latents.iter().map(|l| l.kernel).collect()
    }

    pub fn inducing_sets(&self) -> Vec<InducingSet> {
        self.latents.iter().map(|l| l.z.clone()).collect()
    }

    pub fn variationals(&self) -> Vec<GaussianVariational> {
        self.latents.iter().map(|l| l.q.clone()).collect()
    }

    pub fn continual_priors(&self) -> Vec<Option<&ContinualPrior>> {
        self.latents.iter().map(|l| l.prior.as_ref()).collect()
    }

    pub fn snapshot(&self) -> Option<&PosteriorSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn domain(&self) -> Option<&Domain> {
        self.domain.as_ref()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Total inducing points over all latents.
    pub fn num_inducing(&self) -> usize {
        self.latents.iter().map(|l| l.z.len()).sum()
    }

    pub fn to_snapshot(&self) -> Result<PosteriorSnapshot> {
        let latents = self
            .latents
            .iter()
            .map(|l| LatentSnapshot::new(l.z.clone(), l.q.clone(), l.kernel))
            .collect::<Result<Vec<_>>>()?;
        PosteriorSnapshot::new(latents, Some(self.mixing.a.clone()))
    }

    fn e_len(&self) -> usize {
        self.latents.iter().map(|l| l.z.len() + tri_len(l.z.len())).sum()
    }

    pub fn n_params(&self) -> usize {
        self.e_len() + 2 * self.latents.len() + self.mixing.a.len()
    }

    /// `[μ_q, lower(L_q)]` for each `q`, then `[ln ℓ_q, ln σ_q]` for each
    /// `q`, then the mixing matrix row-major (`D×Q`).
    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.latents {
            pack_variational(&l.q, &mut out);
        }
        for l in &self.latents {
            out.extend(l.kernel.log_params());
        }
        let a = &self.mixing.a;
        for d in 0..a.nrows() {
            out.extend(a.row(d).iter());
        }
        DVector::from_vec(out)
    }

    pub fn with_params(&self, theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(GpError::param(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let flat = theta.as_slice();
        let mut out = self.clone();
        let mut k = 0;
        for lat in out.latents.iter_mut() {
            let m = lat.z.len();
            lat.q = unpack_variational(m, &flat[k..k + m + tri_len(m)])?;
            k += m + tri_len(m);
        }
        for lat in out.latents.iter_mut() {
            lat.kernel = unpack_kernel(&lat.kernel, &flat[k..k + 2])?;
            k += 2;
        }
        let (d, q) = self.mixing.a.shape();
        out.mixing = LmcMixing::new(DMatrix::from_row_slice(d, q, &flat[k..]))?;
        Ok(out)
    }

    fn latent_inputs(&self, with_prior: bool) -> Vec<LatentInput<'_>> {
        self.latents
            .iter()
            .map(|l| LatentInput {
                kernel: &l.kernel,
                z: &l.z,
                q: &l.q,
                continual: if with_prior { l.prior.as_ref() } else { None },
            })
            .collect()
    }

    /// The bound over all present channels; continual terms are included
    /// once a snapshot is attached.
    pub fn elbo_multi(&self, batch: &ChannelBatch) -> Result<MultiElbo> {
        self.elbo_multi_scaled(batch, 1.0)
    }

    /// As [`Self::elbo_multi`] with every expectation term multiplied by `scale`.
    pub fn elbo_multi_scaled(&self, batch: &ChannelBatch, scale: f64) -> Result<MultiElbo> {
        if batch.n_channels() != self.n_outputs() {
            return Err(GpError::param(format!(
                "batch has {} channels, model has {}",
                batch.n_channels(),
                self.n_outputs()
            )));
        }
        if self.snapshot.is_some() && self.latents.iter().any(|l| l.prior.is_none()) {
            return Err(GpError::StaleCache("continual priors have not been built".into()));
        }
        let latents = self.latent_inputs(true);
        let channels: Vec<Option<ChannelInput<'_>>> = batch
            .channels
            .iter()
            .zip(&self.likelihoods.per_channel)
            .map(|(ch, spec)| {
                ch.as_ref().map(|(x, y)| ChannelInput {
                    x,
                    y,
                    spec,
                    scale,
                })
            })
            .collect();
        let (terms, raw) = bound::evaluate(&latents, &self.mixing.a, &channels, &self.rule, true)?;
        let raw = raw.expect("gradients requested");
        let mut grad: Vec<f64> = Vec::with_capacity(self.n_params());
        let mut hyper: Vec<f64> = Vec::with_capacity(2 * self.latents.len());
        for g in &raw.latents {
            let flat = flatten_grad(g);
            let e = flat.len() - 2;
            grad.extend(flat.rows(0, e).iter());
            hyper.extend(flat.rows(e, 2).iter());
        }
        grad.extend(hyper);
        for d in 0..raw.mixing.nrows() {
            grad.extend(raw.mixing.row(d).iter());
        }
        Ok(MultiElbo {
            value: terms.value(),
            terms,
            grad: DVector::from_vec(grad),
        })
    }

    /// Latent marginals of `f_d` at `x`.
    pub fn predict_channel(&self, d: usize, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        bound::channel_marginals(&self.latent_inputs(false), &self.mixing.a, d, x, DEFAULT_JITTER)
    }

    /// Optimize the bound on `batch` in place (VEM when configured).
    pub fn fit(&mut self, batch: &ChannelBatch, cfg: &StepConfig) -> Result<FitReport> {
        for (d, ch) in batch.channels.iter().enumerate() {
            if let Some((_, y)) = ch {
                for &yi in y {
                    self.likelihoods.per_channel[d].check_output(yi)?;
                }
            }
        }
        let n = batch.n_total();
        let minibatch = cfg.optimizer.minibatch_size;
        let template = self.clone();
        let mut objective = |theta: &DVector<f64>, idx: Option<&[usize]>| -> Result<(f64, DVector<f64>)> {
            let model = template.with_params(theta)?;
            let e = match idx {
                Some(idx) if minibatch.is_some() => {
                    model.elbo_multi_scaled(&batch.select(idx), n as f64 / idx.len() as f64)?
                }
                _ => model.elbo_multi(batch)?,
            };
            Ok((e.value, e.grad))
        };
        let opt = crate::optimize::OptimizerConfig {
            seed: cfg.optimizer.seed ^ cfg.step_seed(self.step + 1),
            ..cfg.optimizer.clone()
        };
        let starts: Vec<&GaussianVariational> = self.latents.iter().map(|l| &l.q).collect();
        let whitening = Whitening::new(&starts);
        let (theta, report) = run_fit(&mut objective, &self.params(), &whitening, n, &opt, cfg.vem.as_ref())?;
        let fitted = self.with_params(&theta)?;
        for (lat, new) in self.latents.iter_mut().zip(fitted.latents) {
            lat.q = canonical(new.q);
            lat.kernel = new.kernel;
        }
        self.mixing = fitted.mixing;
        Ok(report)
    }

    /// First step: per-latent inducing inputs over the batch domain, random
    /// mixing, `q_q` at the priors, standard bound maximized.
    pub fn first_step(
        kernels: Vec<Kernel>,
        likelihoods: HeterogeneousModel,
        batch: &ChannelBatch,
        cfg: &StepConfig,
    ) -> Result<(Self, FitReport)> {
        let domain = batch_domain(batch, None)?;
        let (lo, hi) = domain.padded();
        let m = cfg.growth.size_at(1, batch.input_dim());
        let seed = cfg.step_seed(1);
        let zs = (0..kernels.len())
            .map(|q| init_inducing(&lo, &hi, m, None, seed.wrapping_add(q as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mixing = LmcMixing::random(likelihoods.len(), kernels.len(), seed ^ 0xA5A5)?;
        let mut model = MultiOutputModel::new(kernels, zs, mixing, likelihoods)?;
        model.domain = Some(domain);
        let report = model.fit(batch, cfg)?;
        model.step = 1;
        Ok((model, report))
    }

    /// One continual update; only `batch` is read.
    pub fn continual_step_multi(&self, batch: &ChannelBatch, cfg: &StepConfig) -> Result<(Self, FitReport)> {
        if batch.n_channels() != self.n_outputs() {
            return Err(GpError::param("batch channel count differs from the model"));
        }
        let snapshot = self.to_snapshot()?;
        let domain = batch_domain(batch, self.domain.clone())?;
        let (lo, hi) = domain.padded();
        let t = self.step + 1;
        let m = cfg.growth.size_at(t, batch.input_dim());
        let seed = cfg.step_seed(t);
        let latents = self
            .latents
            .iter()
            .zip(snapshot.latents())
            .enumerate()
            .map(|(qi, (lat, old))| {
                let z = init_inducing(&lo, &hi, m, Some(&lat.z), seed.wrapping_add(qi as u64))?;
                let prior = reconstruct_continual_prior(old, &z)?;
                let q = GaussianVariational::from_mean_cov(prior.mean.clone(), &prior.cov)?;
                let kernel = cfg.hyper_init.apply(&lat.kernel)?;
                Ok(LatentState {
                    kernel,
                    z,
                    q,
                    prior: Some(prior),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mixing = match cfg.mixing_init {
            MixingInit::Carry => self.mixing.clone(),
            MixingInit::Random => LmcMixing::random(self.n_outputs(), self.n_latents(), seed ^ 0xA5A5)?,
        };
        let mut model = MultiOutputModel {
            latents,
            mixing,
            likelihoods: self.likelihoods.clone(),
            snapshot: Some(snapshot),
            rule: self.rule.clone(),
            domain: Some(domain),
            step: self.step,
        };
        let report = model.fit(batch, cfg)?;
        model.step = t;
        Ok((model, report))
    }
}

fn batch_domain(batch: &ChannelBatch, start: Option<Domain>) -> Result<Domain> {
    let mut domain = start;
    for (x, _) in batch.channels.iter().flatten() {
        if x.nrows() == 0 {
            continue;
        }
        match &mut domain {
            Some(d) => d.include(x)?,
            None => domain = Some(Domain::from_inputs(x)?),
        }
    }
    domain.ok_or_else(|| GpError::param("batch has no inputs"))
}
