//! Shared evaluation of the variational bounds.
//!
//! Every bound in the crate is a sum of per-channel expectation terms over
//! the marginals of `f_d = Σ_q a_{q,d} u_q` and three Q-summed KL terms:
//!
//! ```text
//! L = Σ_d s_d Σ_n E_q[log p(y_dn | f_dn)]
//!     − Σ_q KL[q_q ‖ p_q(ψ_new)] + Σ_q KL[q_q ‖ p_q(ψ_old)] − Σ_q KL[q_q ‖ q̃_q]
//! ```
//!
//! where `s_d` is a minibatch scale. The last two KLs appear only on
//! continual steps. The single-output bound is the case `D = Q = 1`, `a = 1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};
use crate::likelihood::LikelihoodSpec;
use crate::math::kl::kl_q_to_ref;
use crate::math::linalg::{cholesky_with_jitter, diag_of_product, lower_triangle, CholeskyFactor, DEFAULT_JITTER};
use crate::math::{Kernel, QuadratureRule};
use crate::variational::{ContinualPrior, GaussianVariational, InducingSet};

/// Marginal variances below this are clamped before quadrature.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Kuu-side quantities of one latent function.
pub(crate) struct PriorBlock {
    pub chol: CholeskyFactor,
    pub ki: DMatrix<f64>,
    /// `d(Kuu + jitter·I)/d log ℓ`, `/d log σ_a`.
    pub dkuu: Option<[DMatrix<f64>; 2]>,
    pub alpha: DVector<f64>,
    pub s: DMatrix<f64>,
    /// `Ki S Ki − Ki`.
    pub b: DMatrix<f64>,
}

impl PriorBlock {
    pub fn new(kernel: &Kernel, z: &InducingSet, q: &GaussianVariational, jitter: f64, grads: bool) -> Result<Self> {
        if q.dim() != z.len() {
            return Err(GpError::param(format!(
                "variational dimension {} does not match {} inducing inputs",
                q.dim(),
                z.len()
            )));
        }
        let (kuu, dkuu) = if grads {
            let (k, g) = kernel.matrix_with_grads(z.z(), z.z())?;
            (k, Some((g.d_log_lengthscale, g.d_log_amplitude)))
        } else {
            (kernel.matrix(z.z(), z.z())?, None)
        };
        let chol = cholesky_with_jitter(&kuu, jitter)?;
        let m = z.len();
        let dkuu = dkuu.map(|(dl, da)| {
            // Jitter is relative to the mean diagonal σ_a², so it scales with σ_a² too.
            let da = da + DMatrix::identity(m, m) * (2.0 * chol.jitter_used);
            [dl, da]
        });
        let ki = chol.inverse();
        let alpha = &ki * &q.mu;
        let s = q.cov();
        let b = &ki * &s * &ki - &ki;
        Ok(PriorBlock { chol, ki, dkuu, alpha, s, b })
    }
}

/// Projection of one latent function onto a set of inputs.
pub(crate) struct CrossBlock {
    pub kfu: DMatrix<f64>,
    pub dkfu: Option<[DMatrix<f64>; 2]>,
    /// `Kfu Ki`.
    pub a: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Unclamped marginal variances.
    pub var: DVector<f64>,
}

impl CrossBlock {
    pub fn new(kernel: &Kernel, z: &InducingSet, prior: &PriorBlock, x: &DMatrix<f64>, grads: bool) -> Result<Self> {
        let (kfu, dkfu) = if grads {
            let (k, g) = kernel.matrix_with_grads(x, z.z())?;
            (k, Some([g.d_log_lengthscale, g.d_log_amplitude]))
        } else {
            (kernel.matrix(x, z.z())?, None)
        };
        let a = &kfu * &prior.ki;
        let mean = &kfu * &prior.alpha;
        let quad = diag_of_product(&(&kfu * &prior.b), &kfu.transpose());
        let var = quad.add_scalar(kernel.variance());
        Ok(CrossBlock { kfu, dkfu, a, mean, var })
    }

    /// Accumulate `∂/∂(μ, L, log ψ)` of `Σ_n gm_n·mean_n + gv_n·var_n`.
    pub fn backprop(
        &self,
        kernel: &Kernel,
        prior: &PriorBlock,
        l: &DMatrix<f64>,
        gm: &DVector<f64>,
        gv: &DVector<f64>,
        out: &mut LatentGrad,
    ) {
        let at = self.a.transpose();
        out.mu += &at * gm;
        let scaled_a = DMatrix::from_fn(self.a.nrows(), self.a.ncols(), |i, j| gv[i] * self.a[(i, j)]);
        let w = &at * scaled_a;
        out.l += lower_triangle(&(&w * l * 2.0));

        let (Some(dkuu), Some(dkfu)) = (&prior.dkuu, &self.dkfu) else {
            return;
        };
        let ws_ki = &w * &prior.s * &prior.ki;
        let g_kuu = -(&at * gm) * prior.alpha.transpose() + &w - &ws_ki - ws_ki.transpose();
        let scaled_kfu = DMatrix::from_fn(self.kfu.nrows(), self.kfu.ncols(), |i, j| gv[i] * self.kfu[(i, j)]);
        let g_kfu = gm * prior.alpha.transpose() + scaled_kfu * &prior.b * 2.0;
        for p in 0..2 {
            out.log_params[p] += g_kuu.dot(&dkuu[p]) + g_kfu.dot(&dkfu[p]);
        }
        out.log_params[1] += 2.0 * kernel.variance() * gv.sum();
    }
}

/// Gradient of a bound w.r.t. one latent function's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrad {
    pub mu: DVector<f64>,
    /// Lower triangular.
    pub l: DMatrix<f64>,
    /// `[∂/∂ log ℓ, ∂/∂ log σ_a]`.
    pub log_params: [f64; 2],
}

impl LatentGrad {
    pub fn zeros(m: usize) -> Self {
        LatentGrad {
            mu: DVector::zeros(m),
            l: DMatrix::zeros(m, m),
            log_params: [0.0; 2],
        }
    }
}

/// Term values of a bound evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTerms {
    /// Scaled expectation term per channel (zero for absent channels).
    pub expectation_per_channel: Vec<f64>,
    pub kl_new: f64,
    /// `Σ_q KL[q_q ‖ p_q(ψ_old)]`; zero on a first step.
    pub kl_old: f64,
    /// `Σ_q KL[q_q ‖ q̃_q]`; zero on a first step.
    pub kl_tilde: f64,
}

impl BoundTerms {
    pub fn expectation(&self) -> f64 {
        self.expectation_per_channel.iter().sum()
    }

    pub fn value(&self) -> f64 {
        self.expectation() - self.kl_new + self.kl_old - self.kl_tilde
    }
}

/// One latent function as seen by the bound.
pub(crate) struct LatentInput<'a> {
    pub kernel: &'a Kernel,
    pub z: &'a InducingSet,
    pub q: &'a GaussianVariational,
    pub continual: Option<&'a ContinualPrior>,
}

/// Observations of one channel, with the factor applied to its expectation term.
pub(crate) struct ChannelInput<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub spec: &'a LikelihoodSpec,
    pub scale: f64,
}

pub(crate) struct RawGrads {
    pub latents: Vec<LatentGrad>,
    /// `D×Q`, same layout as the mixing matrix.
    pub mixing: DMatrix<f64>,
}

/// Evaluate the bound for `latents` mixed by `mixing` (`D×Q`, entry
/// `(d, q) = a_{q,d}`), with `channels[d] = None` for channels absent from
/// the batch.
pub(crate) fn evaluate(
    latents: &[LatentInput<'_>],
    mixing: &DMatrix<f64>,
    channels: &[Option<ChannelInput<'_>>],
    rule: &QuadratureRule,
    grads: bool,
) -> Result<(BoundTerms, Option<RawGrads>)> {
    let n_q = latents.len();
    let n_d = channels.len();
    if mixing.shape() != (n_d, n_q) {
        return Err(GpError::param(format!(
            "mixing is {:?}, expected {n_d}x{n_q}",
            mixing.shape()
        )));
    }
    let priors = latents
        .iter()
        .map(|lat| PriorBlock::new(lat.kernel, lat.z, lat.q, DEFAULT_JITTER, grads))
        .collect::<Result<Vec<_>>>()?;
    let mut lgrads: Vec<LatentGrad> = latents.iter().map(|lat| LatentGrad::zeros(lat.q.dim())).collect();
    let mut mgrad = DMatrix::zeros(n_d, n_q);
    let mut expectation_per_channel = vec![0.0; n_d];

    for (d, chan) in channels.iter().enumerate() {
        let Some(chan) = chan else { continue };
        let n = chan.x.nrows();
        if chan.y.len() != n {
            return Err(GpError::param(format!("channel {d}: {n} inputs but {} outputs", chan.y.len())));
        }
        if n == 0 {
            continue;
        }
        let cross = latents
            .iter()
            .zip(&priors)
            .map(|(lat, prior)| {
                if chan.x.ncols() != lat.z.input_dim() {
                    return Err(GpError::param("input dimension does not match inducing inputs"));
                }
                CrossBlock::new(lat.kernel, lat.z, prior, chan.x, grads)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mean = DVector::zeros(n);
        let mut var = DVector::zeros(n);
        for (qi, c) in cross.iter().enumerate() {
            let a = mixing[(d, qi)];
            mean.axpy(a, &c.mean, 1.0);
            var.axpy(a * a, &c.var, 1.0);
        }
        let mut gm = DVector::zeros(n);
        let mut gv = DVector::zeros(n);
        let mut total = 0.0;
        for i in 0..n {
            let clamped = var[i] < VARIANCE_FLOOR;
            let v = if clamped { VARIANCE_FLOOR } else { var[i] };
            let ve = chan.spec.variational_expectation(chan.y[i], mean[i], v, rule)?;
            total += ve.value;
            gm[i] = chan.scale * ve.dm;
            gv[i] = if clamped { 0.0 } else { chan.scale * ve.dv };
        }
        expectation_per_channel[d] = chan.scale * total;
        if grads {
            for (qi, c) in cross.iter().enumerate() {
                let a = mixing[(d, qi)];
                mgrad[(d, qi)] += gm.dot(&c.mean) + 2.0 * a * gv.dot(&c.var);
                let gm_q = &gm * a;
                let gv_q = &gv * (a * a);
                c.backprop(latents[qi].kernel, &priors[qi], &latents[qi].q.l, &gm_q, &gv_q, &mut lgrads[qi]);
            }
        }
    }

    let mut kl_new = 0.0;
    let mut kl_old = 0.0;
    let mut kl_tilde = 0.0;
    for (qi, (lat, prior)) in latents.iter().zip(&priors).enumerate() {
        let m = lat.q.dim();
        let zero = DVector::zeros(m);
        let kn = kl_q_to_ref(&lat.q.mu, &lat.q.l, &zero, &prior.chol);
        kl_new += kn.value;
        if grads {
            let g = &mut lgrads[qi];
            g.mu -= &kn.d_mu;
            g.l -= &kn.d_l;
            if let Some(dkuu) = &prior.dkuu {
                for p in 0..2 {
                    g.log_params[p] -= kn.d_ref_cov.dot(&dkuu[p]);
                }
            }
        }
        if let Some(cp) = lat.continual {
            if !cp.is_valid_for(lat.z) {
                return Err(GpError::StaleCache(format!(
                    "continual prior for latent {qi} was built on different inducing inputs"
                )));
            }
            let ko = kl_q_to_ref(&lat.q.mu, &lat.q.l, &zero, &cp.old_prior_factor);
            let kt = kl_q_to_ref(&lat.q.mu, &lat.q.l, &cp.mean, &cp.cov_factor);
            kl_old += ko.value;
            kl_tilde += kt.value;
            if grads {
                let g = &mut lgrads[qi];
                g.mu += &ko.d_mu - &kt.d_mu;
                g.l += &ko.d_l - &kt.d_l;
            }
        }
    }

    let terms = BoundTerms {
        expectation_per_channel,
        kl_new,
        kl_old,
        kl_tilde,
    };
    let raw = grads.then_some(RawGrads {
        latents: lgrads,
        mixing: mgrad,
    });
    Ok((terms, raw))
}

/// Per-point latent marginals of channel `d` (no likelihood).
pub(crate) fn channel_marginals(
    latents: &[LatentInput<'_>],
    mixing: &DMatrix<f64>,
    d: usize,
    x: &DMatrix<f64>,
    jitter: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if d >= mixing.nrows() {
        return Err(GpError::param(format!("channel {d} out of range")));
    }
    let n = x.nrows();
    let mut mean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    for (qi, lat) in latents.iter().enumerate() {
        if x.ncols() != lat.z.input_dim() {
            return Err(GpError::param("input dimension does not match inducing inputs"));
        }
        let prior = PriorBlock::new(lat.kernel, lat.z, lat.q, jitter, false)?;
        let c = CrossBlock::new(lat.kernel, lat.z, &prior, x, false)?;
        let a = mixing[(d, qi)];
        mean.axpy(a, &c.mean, 1.0);
        var.axpy(a * a, &c.var, 1.0);
    }
    Ok((mean, var.map(|v| v.max(0.0))))
}

/// Projection of a single latent function, kept for callers that need the
/// raw (unclamped) variances.
pub(crate) struct LatentProjection {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl LatentProjection {
    pub fn new(
        kernel: &Kernel,
        z: &InducingSet,
        q: &GaussianVariational,
        x: &DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        if x.ncols() != z.input_dim() {
            return Err(GpError::param("input dimension does not match inducing inputs"));
        }
        let prior = PriorBlock::new(kernel, z, q, jitter, false)?;
        let c = CrossBlock::new(kernel, z, &prior, x, false)?;
        Ok(LatentProjection { mean: c.mean, var: c.var })
    }
}
