//! Prior log-densities and exact prior draws.
//!
//! Fixed effects: `beta_p ~ N(0, sigma^2 / (g theta_p))`,
//! `theta_p ~ Exp(rate = phi_p^2 / 2)`, `phi_p ~ Gamma(1, 1)`.
//!
//! Random effects: `lambda_k ~ N+(0, tau_k^2 h^2)` on the slab with a point
//! mass at zero selected by `I_k`, `tau_k^2 ~ IG(nu / 2, v / 2)`,
//! `r ~ N(mu, Sigma)` restricted by the zero rule, and
//! `xi_ik ~ N(0, kappa_k)`, `kappa_k ~ Exp(rate = m_k^2 / 2)`,
//! `m_k ~ Gamma(1, 1)`.
//!
//! Excluded parameters keep their slab prior as a pseudo-prior, so the raw
//! values are always distributed as the slab a priori.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BlockState, FamilyKind, Hyperparameters, ModelDims, ParameterState};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Whether `kappa_k` is the variance or the standard deviation of `xi_ik`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum XiScale {
    #[default]
    Variance,
    StdDev,
}

impl XiScale {
    pub fn variance(self, kappa: f64) -> f64 {
        match self {
            XiScale::Variance => kappa,
            XiScale::StdDev => kappa * kappa,
        }
    }
}

fn d_zero() -> f64 {
    0.0
}
fn d_one() -> f64 {
    1.0
}
fn d_small() -> f64 {
    0.01
}

/// Prior settings beyond the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorOptions {
    /// Common prior mean of the `r` coordinates.
    #[serde(default = "d_zero")]
    pub gamma_mean: f64,
    /// `Sigma = gamma_variance * I`.
    #[serde(default = "d_one")]
    pub gamma_variance: f64,
    #[serde(default)]
    pub xi_scale: XiScale,
    /// Gaussian residual variance `~ IG(shape, scale)`.
    #[serde(default = "d_small")]
    pub sigma2_shape: f64,
    #[serde(default = "d_small")]
    pub sigma2_scale: f64,
    /// Negative-binomial overdispersion `~ Gamma(shape, rate)`.
    #[serde(default = "d_small")]
    pub dispersion_shape: f64,
    #[serde(default = "d_small")]
    pub dispersion_rate: f64,
}

impl Default for PriorOptions {
    fn default() -> Self {
        PriorOptions {
            gamma_mean: 0.0,
            gamma_variance: 1.0,
            xi_scale: XiScale::Variance,
            sigma2_shape: 0.01,
            sigma2_scale: 0.01,
            dispersion_shape: 0.01,
            dispersion_rate: 0.01,
        }
    }
}

impl PriorOptions {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.gamma_mean.is_finite() {
            out.push("priors.gamma_mean must be finite".into());
        }
        for (name, v) in [
            ("gamma_variance", self.gamma_variance),
            ("sigma2_shape", self.sigma2_shape),
            ("sigma2_scale", self.sigma2_scale),
            ("dispersion_shape", self.dispersion_shape),
            ("dispersion_rate", self.dispersion_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("priors.{name} must be positive and finite, got {v}"));
            }
        }
        out
    }
}

/// Everything the prior evaluators and samplers need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub hyper: Hyperparameters,
    pub options: PriorOptions,
}

impl PriorConfig {
    pub fn new(hyper: Hyperparameters, options: PriorOptions) -> Result<Self> {
        let mut problems = hyper.problems();
        problems.extend(options.problems());
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(PriorConfig { hyper, options })
    }

    /// Mean vector and covariance of `r` for a block of size `q`.
    pub fn gamma_moments(&self, q: usize) -> (Vec<f64>, Vec<f64>) {
        let d = q * q.saturating_sub(1) / 2;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = self.options.gamma_variance;
        }
        (vec![self.options.gamma_mean; d], cov)
    }
}

/// Univariate log-densities.
pub mod density {
    use super::*;

    pub fn normal(x: f64, mean: f64, var: f64) -> f64 {
        let d = x - mean;
        -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var)
    }

    /// Normal truncated to `[0, inf)`; `-inf` below zero.
    pub fn half_normal(x: f64, var: f64) -> f64 {
        if x < 0.0 {
            return f64::NEG_INFINITY;
        }
        std::f64::consts::LN_2 + normal(x, 0.0, var)
    }

    /// `IG(shape, scale)`: `b^a / Gamma(a) x^(-a-1) exp(-b / x)`.
    pub fn inverse_gamma(x: f64, shape: f64, scale: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
    }

    /// `Gamma(shape, rate)`.
    pub fn gamma(x: f64, shape: f64, rate: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
    }

    pub fn exponential(x: f64, rate: f64) -> f64 {
        if x < 0.0 {
            return f64::NEG_INFINITY;
        }
        rate.ln() - rate * x
    }
}

/// Exact draws used by initialization and by conjugate Gibbs steps.
pub mod draw {
    use super::*;

    pub fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        mean + var.sqrt() * z
    }

    /// `|N(0, var)|`, capped at the largest finite value when `var`
    /// overflows.
    pub fn half_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (var.sqrt() * z.abs()).min(f64::MAX)
    }

    /// `Gamma(shape, rate)`.
    ///
    /// Drawn as a unit-rate variate divided by `rate`, so extreme rates
    /// underflow or overflow gracefully instead of failing.
    pub fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
        let unit: f64 = Gamma::new(shape, 1.0).expect("positive gamma shape").sample(rng);
        (unit / rate).clamp(f64::MIN_POSITIVE, f64::MAX)
    }

    pub fn inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
        1.0 / gamma(rng, shape, scale)
    }

    pub fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
        gamma(rng, 1.0, rate)
    }

    pub fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
        Bernoulli::new(p).expect("probability in [0, 1]").sample(rng)
    }
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

/// Joint log-density of the fixed-effect hierarchy for one coefficient.
pub fn log_prior_beta(beta: f64, theta: f64, phi: f64, sigma2: f64, g_shrink: f64) -> Result<f64> {
    require_positive("theta", theta)?;
    require_positive("phi", phi)?;
    require_positive("sigma2", sigma2)?;
    let var = sigma2 / (g_shrink * theta);
    Ok(density::normal(beta, 0.0, var) + density::exponential(theta, phi * phi / 2.0) + density::gamma(phi, 1.0, 1.0))
}

/// Log prior of `(I_k, lambda_k, tau_k^2)`.
///
/// The slab density applies to the raw `lambda_k` whatever the indicator
/// (pseudo-prior); the indicator adds `ln(prior_inclusion)` when on and
/// `ln(1 - prior_inclusion)` when off.
pub fn log_prior_lambda(lambda: f64, included: bool, tau2: f64, hyper: &Hyperparameters) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    require_positive("tau2", tau2)?;
    let pi = hyper.prior_inclusion;
    let indicator = if included { pi.ln() } else { (1.0 - pi).ln() };
    Ok(indicator
        + density::half_normal(lambda, tau2 * hyper.h * hyper.h)
        + density::inverse_gamma(tau2, hyper.nu / 2.0, hyper.v / 2.0))
}

/// Which packed `r` coordinates are free (not forced to zero) given the
/// random-effect indicators.
pub fn free_gamma_mask(included: &[bool]) -> Vec<bool> {
    let q = included.len();
    let mut mask = Vec::with_capacity(q * q.saturating_sub(1) / 2);
    for u in 1..q {
        for v in 0..u {
            mask.push(included[u] && included[v]);
        }
    }
    mask
}

/// Split of the `r` prior into the free block and the pseudo-prior on the
/// constrained coordinates (conditional on the free ones).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPriorTerms {
    pub free: f64,
    pub pseudo: f64,
    pub free_dim: usize,
}

impl GammaPriorTerms {
    pub fn total(&self) -> f64 {
        self.free + self.pseudo
    }
}

pub fn gamma_prior_terms(r: &[f64], included: &[bool], mean: &[f64], cov: &[f64]) -> Result<GammaPriorTerms> {
    let d = r.len();
    let q = included.len();
    if d != q * q.saturating_sub(1) / 2 || mean.len() != d || cov.len() != d * d {
        return Err(Error::Config(format!(
            "r prior dimensions disagree: {d} coordinates for q = {q}"
        )));
    }
    let chol = linalg::cholesky(cov, d)?;
    let joint = linalg::mvn_log_density(r, mean, &chol);
    let free_idx: Vec<usize> = free_gamma_mask(included)
        .iter()
        .enumerate()
        .filter_map(|(j, &f)| f.then_some(j))
        .collect();
    let free = if free_idx.is_empty() {
        0.0
    } else {
        let sub = linalg::submatrix(cov, d, &free_idx);
        let sub_chol = linalg::cholesky(&sub, free_idx.len())?;
        let x: Vec<f64> = free_idx.iter().map(|&j| r[j]).collect();
        let m: Vec<f64> = free_idx.iter().map(|&j| mean[j]).collect();
        linalg::mvn_log_density(&x, &m, &sub_chol)
    };
    Ok(GammaPriorTerms {
        free,
        pseudo: joint - free,
        free_dim: free_idx.len(),
    })
}

/// Log prior of the packed `r` vector: normal over the free coordinates
/// plus the pseudo-prior on the constrained ones.
pub fn log_prior_gamma_vec(r: &[f64], included: &[bool], mean: &[f64], cov: &[f64]) -> Result<f64> {
    Ok(gamma_prior_terms(r, included, mean, cov)?.total())
}

/// Stagewise log-density of one latent effect and its scale hierarchy.
pub fn log_prior_xi(xi: f64, kappa: f64, m: f64, scale: XiScale) -> Result<f64> {
    require_positive("kappa", kappa)?;
    require_positive("m", m)?;
    Ok(density::normal(xi, 0.0, scale.variance(kappa))
        + density::exponential(kappa, m * m / 2.0)
        + density::gamma(m, 1.0, 1.0))
}

/// Log prior of one random-effect block (all stages, pseudo-priors included).
pub(crate) fn log_prior_block(
    block: &BlockState,
    config: &PriorConfig,
    uses_gamma: bool,
    selects: bool,
) -> Result<f64> {
    let q = block.q();
    let mut total = 0.0;
    for k in 0..q {
        total += log_prior_lambda(block.lambda[k], block.included[k], block.tau2[k], &config.hyper)?;
        if !selects {
            // indicators are fixed, not random
            total -= config.hyper.prior_inclusion.ln();
        }
        total +=
            density::exponential(block.kappa[k], block.m[k] * block.m[k] / 2.0) + density::gamma(block.m[k], 1.0, 1.0);
    }
    for g in 0..block.n_groups() {
        for (k, &xi) in block.xi_row(g).iter().enumerate() {
            total += density::normal(xi, 0.0, config.options.xi_scale.variance(block.kappa[k]));
        }
    }
    if uses_gamma && q > 1 {
        let (mean, cov) = config.gamma_moments(q);
        total += log_prior_gamma_vec(&block.gamma, &block.included, &mean, &cov)?;
    }
    Ok(total)
}

/// Log prior density of a full state.
pub fn log_prior_state(state: &ParameterState, config: &PriorConfig, dims: &ModelDims) -> Result<f64> {
    let sigma2 = state.sigma2(dims.family);
    let selects = dims.mode.selects();
    let pi = config.hyper.prior_inclusion;
    let mut total = 0.0;
    for p in 0..state.beta.len() {
        total += log_prior_beta(
            state.beta[p],
            state.theta[p],
            state.phi[p],
            sigma2,
            config.hyper.g_shrink,
        )?;
        if selects {
            total += if state.fixed_included[p] {
                pi.ln()
            } else {
                (1.0 - pi).ln()
            };
        }
    }
    for block in &state.blocks {
        total += log_prior_block(block, config, dims.mode.uses_gamma(), selects)?;
    }
    match (dims.family, state.dispersion) {
        (FamilyKind::Gaussian, Some(s2)) => {
            total += density::inverse_gamma(s2, config.options.sigma2_shape, config.options.sigma2_scale)
        }
        (FamilyKind::NegativeBinomial, Some(r)) => {
            total += density::gamma(r, config.options.dispersion_shape, config.options.dispersion_rate)
        }
        _ => {}
    }
    Ok(total)
}

/// Draws `r ~ N(mean, cov)`.
pub(crate) fn draw_gamma_vec<R: Rng + ?Sized>(rng: &mut R, mean: &[f64], cov: &[f64]) -> Result<Vec<f64>> {
    let d = mean.len();
    let chol = linalg::cholesky(cov, d)?;
    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    Ok((0..d)
        .map(|i| mean[i] + (0..=i).map(|k| chol[i * d + k] * z[k]).sum::<f64>())
        .collect())
}

/// Exact draw from the joint prior. Deterministic given the RNG state.
///
/// Indicators are fixed at 1 when the mode does no selection; `r` is left at
/// zero in diagonal mode.
pub fn sample_prior<R: Rng + ?Sized>(config: &PriorConfig, dims: &ModelDims, rng: &mut R) -> Result<ParameterState> {
    let hyper = &config.hyper;
    let selects = dims.mode.selects();
    let dispersion = match dims.family {
        FamilyKind::Gaussian => Some(draw::inverse_gamma(
            rng,
            config.options.sigma2_shape,
            config.options.sigma2_scale,
        )),
        FamilyKind::NegativeBinomial => Some(draw::gamma(
            rng,
            config.options.dispersion_shape,
            config.options.dispersion_rate,
        )),
        _ => None,
    };
    let sigma2 = match dims.family {
        FamilyKind::Gaussian => dispersion.unwrap_or(1.0),
        _ => 1.0,
    };
    let l = dims.n_fixed;
    let mut state = ParameterState {
        beta: Vec::with_capacity(l),
        fixed_included: Vec::with_capacity(l),
        theta: Vec::with_capacity(l),
        phi: Vec::with_capacity(l),
        blocks: Vec::with_capacity(dims.blocks.len()),
        dispersion,
    };
    for _ in 0..l {
        let included = !selects || draw::bernoulli(rng, hyper.prior_inclusion);
        let phi = draw::gamma(rng, 1.0, 1.0);
        let theta = draw::exponential(rng, phi * phi / 2.0);
        let beta = draw::normal(rng, 0.0, sigma2 / (hyper.g_shrink * theta));
        state.fixed_included.push(included);
        state.phi.push(phi);
        state.theta.push(theta);
        state.beta.push(beta);
    }
    for bd in &dims.blocks {
        let q = bd.q;
        let mut block = BlockState {
            lambda: Vec::with_capacity(q),
            included: Vec::with_capacity(q),
            gamma: vec![0.0; q * q.saturating_sub(1) / 2],
            xi: vec![0.0; q * bd.n_groups],
            kappa: Vec::with_capacity(q),
            m: Vec::with_capacity(q),
            tau2: Vec::with_capacity(q),
        };
        for _ in 0..q {
            let included = !selects || draw::bernoulli(rng, hyper.prior_inclusion);
            let tau2 = draw::inverse_gamma(rng, hyper.nu / 2.0, hyper.v / 2.0);
            let lambda = draw::half_normal(rng, tau2 * hyper.h * hyper.h);
            let m = draw::gamma(rng, 1.0, 1.0);
            let kappa = draw::exponential(rng, m * m / 2.0);
            block.included.push(included);
            block.tau2.push(tau2);
            block.lambda.push(lambda);
            block.m.push(m);
            block.kappa.push(kappa);
        }
        if dims.mode.uses_gamma() && q > 1 {
            let (mean, cov) = config.gamma_moments(q);
            block.gamma = draw_gamma_vec(rng, &mean, &cov)?;
        }
        for g in 0..bd.n_groups {
            for k in 0..q {
                let var = config.options.xi_scale.variance(block.kappa[k]);
                block.xi[g * q + k] = draw::normal(rng, 0.0, var);
            }
        }
        state.blocks.push(block);
    }
    Ok(state)
}
