//! Single-output continual sparse GP.
//!
//! A step at `t = 1` maximizes the standard sparse variational bound. Every
//! later step freezes the current posterior, places new inducing inputs over
//! the visited domain, rebuilds the continual prior on them, and maximizes
//!
//! ```text
//! L_C = E_q[log p(y|f)] − KL[q ‖ p(u|ψ_new)] + KL[q ‖ p(u|ψ_old)] − KL[q ‖ q̃(u)]
//! ```
//!
//! using only the current batch.

use nalgebra::{DMatrix, DVector};

use crate::bound::{self, BoundTerms, ChannelInput, LatentGrad, LatentInput};
use crate::error::{GpError, Result};
use crate::fit::{
    canonical, pack_variational, run_fit, Whitening, tri_len, unpack_kernel, unpack_variational, Domain, FitReport, StepConfig,
};
use crate::likelihood::LikelihoodSpec;
use crate::math::linalg::{cholesky_with_jitter, DEFAULT_JITTER};
use crate::math::{Kernel, QuadratureRule};
use crate::variational::{
    init_inducing, reconstruct_continual_prior, ContinualPrior, GaussianVariational, InducingSet, PosteriorSnapshot,
};

/// Value, term breakdown and flat gradient (in [`SingleOutputModel::params`] layout).
#[derive(Debug, Clone)]
pub struct Elbo {
    pub value: f64,
    pub terms: BoundTerms,
    pub grad: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SingleOutputModel {
    kernel: Kernel,
    likelihood: LikelihoodSpec,
    z: InducingSet,
    q: GaussianVariational,
    snapshot: Option<PosteriorSnapshot>,
    prior_cache: Option<ContinualPrior>,
    rule: QuadratureRule,
    domain: Option<Domain>,
    step: usize,
}

impl SingleOutputModel {
    /// Untrained model with `q(u)` set to the prior `N(0, Kuu)`.
    pub fn new(kernel: Kernel, likelihood: LikelihoodSpec, z: InducingSet) -> Result<Self> {
        likelihood.validate()?;
        let kuu = kernel.matrix(z.z(), z.z())?;
        let l = cholesky_with_jitter(&kuu, DEFAULT_JITTER)?.l();
        let q = GaussianVariational::new(DVector::zeros(z.len()), l)?;
        Ok(SingleOutputModel {
            kernel,
            likelihood,
            z,
            q,
            snapshot: None,
            prior_cache: None,
            rule: QuadratureRule::default(),
            domain: None,
            step: 0,
        })
    }

    pub fn with_quadrature(mut self, rule: QuadratureRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_variational(mut self, q: GaussianVariational) -> Result<Self> {
        if q.dim() != self.z.len() {
            return Err(GpError::param("variational dimension does not match the inducing set"));
        }
        self.q = q;
        Ok(self)
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    /// Attach a snapshot and build the continual prior on the current
    /// inducing inputs; `q` is left unchanged.
    pub fn with_snapshot(mut self, snapshot: PosteriorSnapshot) -> Result<Self> {
        let [latent] = snapshot.latents() else {
            return Err(GpError::param("single-output model needs a one-latent snapshot"));
        };
        self.prior_cache = Some(reconstruct_continual_prior(latent, &self.z)?);
        self.snapshot = Some(snapshot);
        Ok(self)
    }

    /// As [`Self::with_snapshot`] with a prebuilt continual prior.
    pub fn with_continual_prior(mut self, snapshot: PosteriorSnapshot, prior: ContinualPrior) -> Result<Self> {
        if !prior.is_valid_for(&self.z) {
            return Err(GpError::StaleCache("continual prior was built on other inducing inputs".into()));
        }
        self.snapshot = Some(snapshot);
        self.prior_cache = Some(prior);
        Ok(self)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn likelihood(&self) -> &LikelihoodSpec {
        &self.likelihood
    }

    pub fn z(&self) -> &InducingSet {
        &self.z
    }

    pub fn q(&self) -> &GaussianVariational {
        &self.q
    }

    pub fn snapshot(&self) -> Option<&PosteriorSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn continual_prior(&self) -> Option<&ContinualPrior> {
        self.prior_cache.as_ref()
    }

    pub fn domain(&self) -> Option<&Domain> {
        self.domain.as_ref()
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn to_snapshot(&self) -> Result<PosteriorSnapshot> {
        PosteriorSnapshot::single(self.z.clone(), self.q.clone(), self.kernel)
    }

    /// `[μ, lower(L) row-major, ln ℓ, ln σ_a]`.
    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        pack_variational(&self.q, &mut out);
        out.extend(self.kernel.log_params());
        DVector::from_vec(out)
    }

    pub fn n_params(&self) -> usize {
        let m = self.z.len();
        m + tri_len(m) + 2
    }

    pub fn with_params(&self, theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(GpError::param(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let m = self.z.len();
        let e_len = m + tri_len(m);
        let mut out = self.clone();
        out.q = unpack_variational(m, &theta.as_slice()[..e_len])?;
        out.kernel = unpack_kernel(&self.kernel, &theta.as_slice()[e_len..])?;
        Ok(out)
    }

    /// `Σ_n E_q[log p(y_n|f_n)] − KL[q ‖ p(u|ψ)]`; only valid before any continual step.
    pub fn elbo_standard(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Elbo> {
        if self.snapshot.is_some() {
            return Err(GpError::param("standard bound requested on a model with a snapshot"));
        }
        self.bound(x, y, 1.0, true)
    }

    pub fn elbo_continual(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Elbo> {
        self.require_continual()?;
        self.bound(x, y, 1.0, true)
    }

    /// Minibatch estimate with the expectation term scaled by `n_total / |b|`.
    pub fn elbo_continual_stochastic(&self, xb: &DMatrix<f64>, yb: &[f64], n_total: usize) -> Result<Elbo> {
        self.require_continual()?;
        let b = xb.nrows();
        if b == 0 || b > n_total {
            return Err(GpError::param(format!("minibatch size {b} outside 1..={n_total}")));
        }
        self.bound(xb, yb, n_total as f64 / b as f64, true)
    }

    /// Whichever bound applies to the model's state (standard or continual).
    pub fn elbo(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Elbo> {
        self.bound(x, y, 1.0, true)
    }

    fn require_continual(&self) -> Result<()> {
        match (&self.snapshot, &self.prior_cache) {
            (None, _) => Err(GpError::param("continual bound requires a snapshot")),
            (Some(_), None) => Err(GpError::StaleCache("continual prior has not been built".into())),
            (Some(_), Some(p)) if !p.is_valid_for(&self.z) => {
                Err(GpError::StaleCache("continual prior was built on other inducing inputs".into()))
            }
            _ => Ok(()),
        }
    }

    fn bound(&self, x: &DMatrix<f64>, y: &[f64], scale: f64, grads: bool) -> Result<Elbo> {
        if self.snapshot.is_some() && self.prior_cache.is_none() {
            return Err(GpError::StaleCache("continual prior has not been built".into()));
        }
        let latents = [LatentInput {
            kernel: &self.kernel,
            z: &self.z,
            q: &self.q,
            continual: self.prior_cache.as_ref(),
        }];
        let channels = [Some(ChannelInput {
            x,
            y,
            spec: &self.likelihood,
            scale,
        })];
        let mixing = DMatrix::from_element(1, 1, 1.0);
        let (terms, raw) = bound::evaluate(&latents, &mixing, &channels, &self.rule, grads)?;
        let grad = match raw {
            Some(raw) => flatten_grad(&raw.latents[0]),
            None => DVector::zeros(0),
        };
        Ok(Elbo {
            value: terms.value(),
            terms,
            grad,
        })
    }

    /// Latent marginals `q(f_*)` at `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let latents = [LatentInput {
            kernel: &self.kernel,
            z: &self.z,
            q: &self.q,
            continual: None,
        }];
        bound::channel_marginals(&latents, &DMatrix::from_element(1, 1, 1.0), 0, x, DEFAULT_JITTER)
    }

    /// Optimize the applicable bound on `(x, y)` in place.
    pub fn fit(&mut self, x: &DMatrix<f64>, y: &[f64], cfg: &StepConfig) -> Result<FitReport> {
        let n = x.nrows();
        if n == 0 || y.len() != n {
            return Err(GpError::param("fit needs a nonempty batch with matching outputs"));
        }
        for &yi in y {
            self.likelihood.check_output(yi)?;
        }
        let minibatch = cfg.optimizer.minibatch_size;
        let template = self.clone();
        let mut objective = |theta: &DVector<f64>, batch: Option<&[usize]>| -> Result<(f64, DVector<f64>)> {
            let model = template.with_params(theta)?;
            let e = match batch {
                Some(idx) if minibatch.is_some() => {
                    let xb = x.select_rows(idx);
                    let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                    model.bound(&xb, &yb, n as f64 / idx.len() as f64, true)?
                }
                _ => model.bound(x, y, 1.0, true)?,
            };
            Ok((e.value, e.grad))
        };
        let opt = crate::optimize::OptimizerConfig {
            seed: cfg.optimizer.seed ^ cfg.step_seed(self.step + 1),
            ..cfg.optimizer.clone()
        };
        let (theta, report) = run_fit(&mut objective, &self.params(), &Whitening::new(&[&self.q]), n, &opt, cfg.vem.as_ref())?;
        let fitted = self.with_params(&theta)?;
        self.q = canonical(fitted.q);
        self.kernel = fitted.kernel;
        if !report.converged {
            log::debug!("step {} stopped before convergence after {} iterations", self.step + 1, report.iters);
        }
        Ok(report)
    }

    /// First step: inducing inputs over the batch domain, `q` at the prior,
    /// then the standard bound is maximized.
    pub fn first_step(
        kernel: Kernel,
        likelihood: LikelihoodSpec,
        x: &DMatrix<f64>,
        y: &[f64],
        cfg: &StepConfig,
    ) -> Result<(Self, FitReport)> {
        let domain = Domain::from_inputs(x)?;
        let (lo, hi) = domain.padded();
        let m = cfg.growth.size_at(1, x.ncols());
        let z = init_inducing(&lo, &hi, m, None, cfg.step_seed(1))?;
        let mut model = SingleOutputModel::new(kernel, likelihood, z)?;
        model.domain = Some(domain);
        let report = model.fit(x, y, cfg)?;
        model.step = 1;
        Ok((model, report))
    }

    /// One continual update on a new batch; never touches earlier data.
    pub fn continual_step(&self, x: &DMatrix<f64>, y: &[f64], cfg: &StepConfig) -> Result<(Self, FitReport)> {
        if x.nrows() == 0 {
            return Err(GpError::param("continual step needs a nonempty batch"));
        }
        let snapshot = self.to_snapshot()?;
        let mut domain = match &self.domain {
            Some(d) => d.clone(),
            None => Domain::from_inputs(self.z.z())?,
        };
        domain.include(x)?;
        let (lo, hi) = domain.padded();
        let t = self.step + 1;
        let m = cfg.growth.size_at(t, x.ncols());
        let z_new = init_inducing(&lo, &hi, m, Some(&self.z), cfg.step_seed(t))?;
        let prior = reconstruct_continual_prior(&snapshot.latents()[0], &z_new)?;
        let q = GaussianVariational::from_mean_cov(prior.mean.clone(), &prior.cov)?;
        let kernel = cfg.hyper_init.apply(&self.kernel)?;
        let mut model = SingleOutputModel {
            kernel,
            likelihood: self.likelihood,
            z: z_new,
            q,
            snapshot: Some(snapshot),
            prior_cache: Some(prior),
            rule: self.rule.clone(),
            domain: Some(domain),
            step: self.step,
        };
        let report = model.fit(x, y, cfg)?;
        model.step = t;
        Ok((model, report))
    }
}

pub(crate) fn flatten_grad(g: &LatentGrad) -> DVector<f64> {
    let m = g.mu.len();
    let mut out = Vec::with_capacity(m + tri_len(m) + 2);
    out.extend(g.mu.iter());
    crate::fit::pack_lower(&g.l, &mut out);
    out.extend(g.log_params);
    DVector::from_vec(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::kl::gaussian_kl;
    use crate::variational::{reconstruct_continual_prior_with, CoincidencePolicy, ReconstructOptions};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn inputs(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn toy_model(lik: LikelihoodSpec) -> SingleOutputModel {
        let z = InducingSet::from_points(&[0.1, 0.5, 0.9], 1).unwrap();
        let q = GaussianVariational::new(
            DVector::from_column_slice(&[0.2, -0.4, 0.7]),
            DMatrix::from_row_slice(3, 3, &[0.6, 0.0, 0.0, 0.1, 0.5, 0.0, -0.2, 0.05, 0.4]),
        )
        .unwrap();
        SingleOutputModel::new(Kernel::rbf(0.3, 1.2).unwrap(), lik, z)
            .unwrap()
            .with_variational(q)
            .unwrap()
    }

    fn fd_check(model: &SingleOutputModel, f: impl Fn(&SingleOutputModel) -> Elbo) {
        let base = f(model);
        let theta = model.params();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&model.with_params(&up).unwrap()).value - f(&model.with_params(&dn).unwrap()).value) / (2.0 * h);
            let an = base.grad[i];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3),
                "param {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn standard_bound_gradients() {
        let x = inputs(&[0.0, 0.2, 0.45, 0.7, 1.0]);
        for (lik, y) in [
            (LikelihoodSpec::gaussian(0.5), vec![0.3, -0.1, 0.8, 1.2, -0.5]),
            (LikelihoodSpec::Bernoulli, vec![1.0, 0.0, 1.0, 1.0, 0.0]),
            (LikelihoodSpec::Poisson, vec![0.0, 2.0, 1.0, 4.0, 0.0]),
        ] {
            let model = toy_model(lik);
            fd_check(&model, |m| m.elbo_standard(&x, &y).unwrap());
        }
    }

    #[test]
    fn prior_q_has_zero_kl() {
        let z = InducingSet::from_points(&[0.1, 0.5, 0.9], 1).unwrap();
        let model = SingleOutputModel::new(Kernel::rbf(0.3, 1.2).unwrap(), LikelihoodSpec::gaussian(1.0), z).unwrap();
        let e = model.elbo_standard(&inputs(&[0.3]), &[0.2]).unwrap();
        assert!(e.terms.kl_new.abs() < 1e-12);
        assert_relative_eq!(e.value, e.terms.expectation(), epsilon = 1e-12);
    }

    #[test]
    fn standard_bound_below_dense_log_marginal() {
        let xs = [0.05, 0.5, 0.95];
        let y = [0.4, -0.3, 1.1];
        let sigma = 0.3;
        let k = Kernel::rbf(0.4, 1.0).unwrap();
        let x = inputs(&xs);
        // Dense GP: log N(y | 0, K + σ²I), direct formula.
        let kxx = k.matrix(&x, &x).unwrap() + DMatrix::identity(3, 3) * sigma * sigma;
        let yv = DVector::from_column_slice(&y);
        let exact = -0.5 * yv.dot(&(kxx.clone().try_inverse().unwrap() * &yv))
            - 0.5 * kxx.determinant().ln()
            - 1.5 * (2.0 * PI).ln();
        let z = InducingSet::new(x.clone()).unwrap();
        let model = SingleOutputModel::new(k, LikelihoodSpec::gaussian(sigma), z).unwrap();
        let e = model.elbo_standard(&x, &y).unwrap();
        assert!(e.value < exact);
    }

    fn continual_model(lik: LikelihoodSpec) -> SingleOutputModel {
        let old = toy_model(lik);
        let snap = old.to_snapshot().unwrap();
        let z_new = InducingSet::from_points(&[0.0, 0.3, 0.6, 1.2], 1).unwrap();
        let q = GaussianVariational::new(
            DVector::from_column_slice(&[0.1, 0.3, -0.2, 0.5]),
            DMatrix::from_row_slice(4, 4, &[0.7, 0.0, 0.0, 0.0, 0.1, 0.6, 0.0, 0.0, 0.0, -0.1, 0.5, 0.0, 0.2, 0.1, 0.0, 0.8]),
        )
        .unwrap();
        SingleOutputModel::new(Kernel::rbf(0.25, 0.9).unwrap(), lik, z_new)
            .unwrap()
            .with_variational(q)
            .unwrap()
            .with_snapshot(snap)
            .unwrap()
    }

    #[test]
    fn continual_bound_gradients() {
        let x = inputs(&[0.8, 1.0, 1.1, 1.3]);
        for (lik, y) in [
            (LikelihoodSpec::gaussian(0.7), vec![0.3, -0.1, 0.8, 1.2]),
            (LikelihoodSpec::Bernoulli, vec![1.0, 0.0, 0.0, 1.0]),
            (LikelihoodSpec::Poisson, vec![3.0, 0.0, 1.0, 2.0]),
        ] {
            let model = continual_model(lik);
            fd_check(&model, |m| m.elbo_continual(&x, &y).unwrap());
            fd_check(&model, |m| m.elbo_continual_stochastic(&x.rows(0, 2).into_owned(), &y[..2], 4).unwrap());
        }
    }

    #[test]
    fn continual_terms_match_direct_kls() {
        let model = continual_model(LikelihoodSpec::gaussian(0.7));
        let x = inputs(&[0.8, 1.1]);
        let y = [0.2, -0.4];
        let e = model.elbo_continual(&x, &y).unwrap();
        let old = toy_model(LikelihoodSpec::gaussian(0.7));
        let zn = model.z().z();
        let (q_mu, q_s) = (model.q().mu.clone(), model.q().cov());
        let zero = DVector::zeros(4);
        let jit = |k: DMatrix<f64>| cholesky_with_jitter(&k, DEFAULT_JITTER).unwrap().reconstruct();
        let p_new = jit(model.kernel().matrix(zn, zn).unwrap());
        let p_old = jit(old.kernel().matrix(zn, zn).unwrap());
        // q̃ from explicit inverses on the jittered old Kuu.
        let kuu = jit(old.kernel().matrix(old.z().z(), old.z().z()).unwrap());
        let inv = kuu.clone().try_inverse().unwrap();
        let ksu = old.kernel().matrix(zn, old.z().z()).unwrap();
        let kss = old.kernel().matrix(zn, zn).unwrap();
        let t_mean = &ksu * &inv * &old.q().mu;
        let t_cov = jit(&kss + &ksu * &inv * (old.q().cov() - &kuu) * &inv * ksu.transpose());
        assert_relative_eq!(e.terms.kl_new, gaussian_kl(&q_mu, &q_s, &zero, &p_new).unwrap(), epsilon = 1e-8);
        assert_relative_eq!(e.terms.kl_old, gaussian_kl(&q_mu, &q_s, &zero, &p_old).unwrap(), epsilon = 1e-8);
        assert_relative_eq!(e.terms.kl_tilde, gaussian_kl(&q_mu, &q_s, &t_mean, &t_cov).unwrap(), epsilon = 1e-7);
        // Expectation term: closed-form Gaussian expected log-density on direct marginals.
        let (m, v) = model.predict(&x).unwrap();
        let sig2 = 0.49;
        let expect: f64 = (0..2)
            .map(|i| -0.5 * (2.0 * PI * sig2).ln() - ((y[i] - m[i]).powi(2) + v[i]) / (2.0 * sig2))
            .sum();
        assert_relative_eq!(e.terms.expectation(), expect, epsilon = 1e-10);
    }

    #[test]
    fn equal_priors_cancel() {
        let old = toy_model(LikelihoodSpec::gaussian(1.0));
        let snap = old.to_snapshot().unwrap();
        let z_new = InducingSet::from_points(&[0.0, 0.45, 1.0], 1).unwrap();
        let model = SingleOutputModel::new(*old.kernel(), LikelihoodSpec::gaussian(1.0), z_new)
            .unwrap()
            .with_snapshot(snap)
            .unwrap();
        let e = model.elbo_continual(&inputs(&[0.3]), &[0.5]).unwrap();
        assert_eq!(e.terms.kl_new, e.terms.kl_old);
        assert_relative_eq!(e.value, e.terms.expectation() - e.terms.kl_tilde, epsilon = 1e-12);
    }

    #[test]
    fn all_four_distributions_equal_gives_expectation_only() {
        // Old posterior at the prior and Z_new = Z_old: q̃ = p_old = p_new.
        let z = InducingSet::from_points(&[0.0, 0.5, 1.0], 1).unwrap();
        let k = Kernel::rbf(0.4, 1.0).unwrap();
        let old = SingleOutputModel::new(k, LikelihoodSpec::gaussian(1.0), z.clone()).unwrap();
        let snap = old.to_snapshot().unwrap();
        let opts = ReconstructOptions { policy: CoincidencePolicy::Allow, ..Default::default() };
        let prior = reconstruct_continual_prior_with(&snap.latents()[0], &z, opts).unwrap();
        let model = SingleOutputModel::new(k, LikelihoodSpec::gaussian(1.0), z)
            .unwrap()
            .with_continual_prior(snap, prior)
            .unwrap();
        let e = model.elbo_continual(&inputs(&[0.3, 0.8]), &[0.5, -0.2]).unwrap();
        assert!(e.terms.kl_new.abs() < 1e-10);
        assert!(e.terms.kl_old.abs() < 1e-10);
        assert!(e.terms.kl_tilde.abs() < 1e-5);
    }

    #[test]
    fn stochastic_full_batch_and_enumeration() {
        let model = continual_model(LikelihoodSpec::gaussian(0.7));
        let xs = [0.8, 0.9, 1.0, 1.1, 1.3];
        let y = [0.3, -0.1, 0.8, 1.2, 0.0];
        let x = inputs(&xs);
        let full = model.elbo_continual(&x, &y).unwrap();
        let same = model.elbo_continual_stochastic(&x, &y, 5).unwrap();
        assert_eq!(full.value, same.value);
        let mean: f64 = (0..5)
            .map(|i| {
                model
                    .elbo_continual_stochastic(&inputs(&xs[i..=i]), &y[i..=i], 5)
                    .unwrap()
                    .value
            })
            .sum::<f64>()
            / 5.0;
        assert!((mean - full.value).abs() < 1e-10);
        assert!(model.elbo_continual_stochastic(&x, &y, 4).is_err());
    }

    #[test]
    fn stale_cache_detected() {
        let model = continual_model(LikelihoodSpec::gaussian(0.7));
        let mut moved = model.clone();
        moved.z = InducingSet::from_points(&[0.0, 0.31, 0.6, 1.2], 1).unwrap();
        assert!(matches!(
            moved.elbo_continual(&inputs(&[0.5]), &[0.1]),
            Err(GpError::StaleCache(_))
        ));
        assert!(toy_model(LikelihoodSpec::gaussian(1.0))
            .elbo_continual(&inputs(&[0.5]), &[0.1])
            .is_err());
        assert!(model.elbo_standard(&inputs(&[0.5]), &[0.1]).is_err());
    }

    #[test]
    fn predict_reverts_far_away() {
        let model = toy_model(LikelihoodSpec::gaussian(1.0));
        let (m, v) = model.predict(&inputs(&[50.0])).unwrap();
        assert!(m[0].abs() < 1e-12);
        assert_relative_eq!(v[0], 1.44, epsilon = 1e-10);
    }

    #[test]
    fn optimized_matches_dense_posterior() {
        let xs = [0.0, 0.3, 0.7, 1.0];
        let y = [0.5, -0.2, 0.9, 0.1];
        let sigma = 0.4;
        let x = inputs(&xs);
        let mut cfg = StepConfig::new(crate::variational::GrowthRule::Constant { m: 4 });
        cfg.optimizer.grad_tol = 1e-9;
        cfg.optimizer.max_iters = 500;
        let k = Kernel::rbf(0.35, 1.1).unwrap();
        let mut model = SingleOutputModel::new(k, LikelihoodSpec::gaussian(sigma), InducingSet::new(x.clone()).unwrap())
            .unwrap();
        // Hyperparameters held fixed: compare only the variational optimum.
        let mut objective = |theta: &DVector<f64>, _: Option<&[usize]>| {
            let mut full = theta.clone().resize_vertically(theta.len() + 2, 0.0);
            let kp = k.log_params();
            full[theta.len()] = kp[0];
            full[theta.len() + 1] = kp[1];
            let e = model.with_params(&full)?.elbo_standard(&x, &y)?;
            Ok((e.value, e.grad.rows(0, theta.len()).into_owned()))
        };
        let p = model.params();
        let x0 = p.rows(0, p.len() - 2).into_owned();
        let r = crate::optimize::maximize(&mut objective, &x0, 0, &cfg.optimizer).unwrap();
        let mut full = r.x.clone().resize_vertically(p.len(), 0.0);
        full[p.len() - 2] = p[p.len() - 2];
        full[p.len() - 1] = p[p.len() - 1];
        model = model.with_params(&full).unwrap();

        let xt = inputs(&[0.15, 0.5, 0.85]);
        let (m, v) = model.predict(&xt).unwrap();
        let kxx = k.matrix(&x, &x).unwrap() + DMatrix::identity(4, 4) * sigma * sigma;
        let inv = kxx.try_inverse().unwrap();
        let kt = k.matrix(&xt, &x).unwrap();
        let dm = &kt * &inv * DVector::from_column_slice(&y);
        let dv = (k.matrix(&xt, &xt).unwrap() - &kt * &inv * kt.transpose()).diagonal();
        assert_relative_eq!(m, dm, epsilon = 1e-4);
        assert_relative_eq!(v, dv, epsilon = 1e-4);
    }
}
