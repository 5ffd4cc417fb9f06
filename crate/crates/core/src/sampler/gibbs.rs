//! One Gibbs scan over all parameter blocks.
//!
//! Every continuous parameter enters the linear predictor linearly, so each
//! coordinate update moves a cached predictor along a sparse direction and
//! only the affected observations are re-evaluated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    logistic, Dataset, EffectiveState, Family, FamilyKind, ModelDims, ModelSpec, ParameterState, SelectionMode,
};
use crate::priors::{self, density, draw, PriorConfig, XiScale};
use crate::reparam::unpack_index;

use super::slice::{slice_update, SliceOutcome};
use super::trace::{ChainStats, Draw};
use super::{SamplerConfig, SliceWidths};

const DRIFT_TOL: f64 = 1e-9;
const MAX_INIT_TRIES: u32 = 1000;
/// Largest initial predictor magnitude; beyond it the cached updates lose
/// the precision that keeps them consistent with a fresh recomputation.
const MAX_INIT_ETA: f64 = 1e6;

#[derive(Debug, Clone, Copy)]
enum Kind {
    Beta = 0,
    Lambda,
    Gamma,
    Xi,
    LogScale,
    LogDispersion,
}

fn width_mut(w: &mut SliceWidths, kind: Kind) -> &mut f64 {
    match kind {
        Kind::Beta => &mut w.beta,
        Kind::Lambda => &mut w.lambda,
        Kind::Gamma => &mut w.gamma,
        Kind::Xi => &mut w.xi,
        Kind::LogScale => &mut w.log_scale,
        Kind::LogDispersion => &mut w.log_dispersion,
    }
}

/// Precision form of the `r` prior for one block.
struct GammaPrior {
    mean: Vec<f64>,
    precision: Vec<f64>,
}

/// Data-dependent quantities shared by all chains.
pub(crate) struct Model<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub config: &'a SamplerConfig,
    dims: ModelDims,
    prior: PriorConfig,
    family: Family,
    constants: Vec<f64>,
    /// Nonzero entries of each fixed-effect column.
    x_cols: Vec<Vec<(usize, f64)>>,
    gamma_priors: Vec<Option<GammaPrior>>,
}

impl<'a> Model<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, config: &'a SamplerConfig) -> Result<Self> {
        data.validate_for(spec.family)?;
        let prior = PriorConfig::new(spec.hyper, spec.priors)?;
        let family = spec.base_family()?;
        let dims = ModelDims::of(spec, data);
        let constants = data.y().iter().map(|&y| family.response_constant(y)).collect();
        let mut x_cols = vec![Vec::new(); data.n_fixed()];
        for i in 0..data.n_obs() {
            for (p, &x) in data.x_row(i).iter().enumerate() {
                if x != 0.0 {
                    x_cols[p].push((i, x));
                }
            }
        }
        let gamma_priors = dims
            .blocks
            .iter()
            .map(|b| {
                if !spec.mode.uses_gamma() || b.q < 2 {
                    return Ok(None);
                }
                let (mean, cov) = prior.gamma_moments(b.q);
                let precision = linalg::spd_inverse(&cov, mean.len())?;
                Ok(Some(GammaPrior { mean, precision }))
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            spec,
            data,
            config,
            dims,
            prior,
            family,
            constants,
            x_cols,
            gamma_priors,
        })
    }

    fn eta_of(&self, state: &ParameterState) -> Vec<f64> {
        let eff = EffectiveState::new(state, self.spec.mode);
        (0..self.data.n_obs()).map(|i| eff.eta(state, self.data, i)).collect()
    }

    fn ll_sum(&self, family: &Family, eta: &[f64]) -> f64 {
        let y = self.data.y();
        (0..eta.len())
            .map(|i| family.log_likelihood_with_const(y[i], eta[i], self.constants[i]))
            .sum()
    }

    /// Prior draw with the dispersion set to 1, redrawn while the
    /// likelihood is not finite or the predictor exceeds [`MAX_INIT_ETA`]. Returns the number of rejected draws.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(ParameterState, u32)> {
        for tries in 0..MAX_INIT_TRIES {
            let mut state = priors::sample_prior(&self.prior, &self.dims, rng)?;
            if state.dispersion.is_some() {
                state.dispersion = Some(1.0);
            }
            let family = self.family.with_dispersion_unchecked(state.dispersion);
            let eta = self.eta_of(&state);
            let ll = self.ll_sum(&family, &eta);
            if ll.is_finite() && eta.iter().all(|e| e.abs() <= MAX_INIT_ETA) {
                return Ok((state, tries));
            }
        }
        Err(Error::Sampler(format!(
            "no prior draw with a finite likelihood and bounded predictor in {MAX_INIT_TRIES} tries"
        )))
    }
}

#[derive(Default, Clone, Copy)]
struct AdaptTally {
    updates: f64,
    step_outs: f64,
    shrinks: f64,
}

/// Mutable chain state with the cached linear predictor.
pub(crate) struct Chain<'m> {
    model: &'m Model<'m>,
    pub state: ParameterState,
    family: Family,
    eta: Vec<f64>,
    pub widths: SliceWidths,
    pub stats: ChainStats,
    pub adapting: bool,
    tally: [AdaptTally; 6],
    scans: usize,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl<'m> Chain<'m> {
    pub fn new(model: &'m Model<'m>, mut state: ParameterState) -> Result<Self> {
        state.check_dims(&model.dims)?;
        let mode = model.spec.mode;
        if !mode.selects() {
            state.fixed_included.iter_mut().for_each(|j| *j = true);
            for b in &mut state.blocks {
                b.included.iter_mut().for_each(|i| *i = true);
            }
        }
        if !mode.uses_gamma() {
            for b in &mut state.blocks {
                b.gamma.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        let family = model.family.with_dispersion_unchecked(state.dispersion);
        let eta = model.eta_of(&state);
        let ll = model.ll_sum(&family, &eta);
        if !ll.is_finite() {
            return Err(Error::Sampler(format!("initial state has log-likelihood {ll}")));
        }
        Ok(Chain {
            model,
            state,
            family,
            eta,
            widths: model.config.widths,
            stats: ChainStats::default(),
            adapting: false,
            tally: [AdaptTally::default(); 6],
            scans: 0,
            idx: Vec::new(),
            val: Vec::new(),
        })
    }

    fn ll_at(&self, i: usize, eta: f64) -> f64 {
        self.family
            .log_likelihood_with_const(self.model.data.y()[i], eta, self.model.constants[i])
    }

    pub fn log_likelihood(&self) -> f64 {
        self.model.ll_sum(&self.family, &self.eta)
    }

    /// Log-likelihood of the observations touched by the current direction,
    /// moved by `delta` along it. A move that overflows the predictor has
    /// likelihood zero.
    fn shifted_ll(&self, delta: f64) -> f64 {
        let mut s = 0.0;
        for (&i, &d) in self.idx.iter().zip(&self.val) {
            let eta = if delta == 0.0 {
                self.eta[i]
            } else {
                self.eta[i] + delta * d
            };
            if !eta.is_finite() {
                return f64::NEG_INFINITY;
            }
            s += self.ll_at(i, eta);
        }
        s
    }

    fn apply_shift(&mut self, delta: f64) {
        if delta == 0.0 {
            return;
        }
        for (&i, &d) in self.idx.iter().zip(&self.val) {
            self.eta[i] += delta * d;
        }
    }

    fn clear_direction(&mut self) {
        self.idx.clear();
        self.val.clear();
    }

    fn push_direction(&mut self, i: usize, d: f64) {
        if d != 0.0 {
            self.idx.push(i);
            self.val.push(d);
        }
    }

    fn note(&mut self, kind: Kind, out: &SliceOutcome) {
        if out.capped {
            self.stats.step_out_cap_hits += 1;
        }
        if self.adapting {
            let t = &mut self.tally[kind as usize];
            t.updates += 1.0;
            t.step_outs += f64::from(out.step_outs);
            // one evaluation at x0, two failing edge checks, one accepted point
            let shrinks = f64::from(out.evaluations) - 4.0 - f64::from(out.step_outs);
            t.shrinks += shrinks.max(0.0);
        }
    }

    fn width(&self, kind: Kind) -> f64 {
        self.widths.values()[kind as usize]
    }

    /// Slice update of a coordinate that moves the predictor along the
    /// current direction, with a centred normal prior of variance `var`.
    /// The initial width is at least the prior sd so that weakly identified
    /// coordinates move on the prior's own scale.
    fn slice_linear<R: Rng + ?Sized>(&mut self, kind: Kind, x0: f64, var: f64, rng: &mut R) -> Result<f64> {
        self.slice_linear_centred(kind, x0, 0.0, var, rng)
    }

    fn slice_linear_centred<R: Rng + ?Sized>(
        &mut self,
        kind: Kind,
        x0: f64,
        mean: f64,
        var: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let base = self.shifted_ll(0.0);
        let out = slice_update(
            |x| self.shifted_ll(x - x0) - base + density::normal(x, mean, var),
            x0,
            self.width(kind).max(var.sqrt()),
            f64::NEG_INFINITY,
            f64::INFINITY,
            self.model.config.max_step_outs,
            rng,
        )?;
        self.note(kind, &out);
        self.apply_shift(out.value - x0);
        Ok(out.value)
    }

    /// Slice update of a half-normal coordinate currently at 0 on the
    /// linear axis, bounded below at 0.
    fn slice_linear_positive<R: Rng + ?Sized>(&mut self, kind: Kind, var: f64, rng: &mut R) -> Result<f64> {
        let base = self.shifted_ll(0.0);
        let out = slice_update(
            |x| self.shifted_ll(x) - base + density::half_normal(x, var),
            0.0,
            self.width(kind).max(var.sqrt()),
            0.0,
            f64::INFINITY,
            self.model.config.max_step_outs,
            rng,
        )?;
        self.note(kind, &out);
        self.apply_shift(out.value);
        Ok(out.value)
    }

    /// As [`Chain::slice_linear`] for a positive coordinate, sliced on
    /// `t = ln x` with the Jacobian added.
    fn slice_linear_log<R: Rng + ?Sized>(
        &mut self,
        kind: Kind,
        x0: f64,
        prior: impl Fn(f64) -> f64,
        rng: &mut R,
    ) -> Result<f64> {
        let base = self.shifted_ll(0.0);
        let out = slice_update(
            |t| {
                let x = t.exp();
                self.shifted_ll(x - x0) - base + prior(x) + t
            },
            x0.ln(),
            self.width(kind),
            f64::NEG_INFINITY,
            f64::INFINITY,
            self.model.config.max_step_outs,
            rng,
        )?;
        self.note(kind, &out);
        let x1 = out.value.exp();
        self.apply_shift(x1 - x0);
        Ok(x1)
    }

    /// Slice update on the log axis of a positive parameter that does not
    /// enter the predictor; `target` is the log-density in `t = ln x`
    /// including the Jacobian.
    fn slice_log<R: Rng + ?Sized>(
        &mut self,
        kind: Kind,
        x0: f64,
        target: impl Fn(f64) -> f64,
        rng: &mut R,
    ) -> Result<f64> {
        let out = slice_update(
            target,
            x0.ln(),
            self.width(kind),
            f64::NEG_INFINITY,
            f64::INFINITY,
            self.model.config.max_step_outs,
            rng,
        )?;
        self.note(kind, &out);
        Ok(out.value.exp())
    }

    pub fn adapt_widths(&mut self) {
        for (k, kind) in [
            Kind::Beta,
            Kind::Lambda,
            Kind::Gamma,
            Kind::Xi,
            Kind::LogScale,
            Kind::LogDispersion,
        ]
        .into_iter()
        .enumerate()
        {
            let t = self.tally[k];
            if t.updates < 1.0 {
                continue;
            }
            let ratio = (1.0 + t.step_outs / t.updates) / (1.0 + t.shrinks / t.updates);
            let w = width_mut(&mut self.widths, kind);
            *w = (*w * ratio.clamp(0.5, 2.0)).clamp(1e-6, 1e6);
            self.tally[k] = AdaptTally::default();
        }
    }

    pub fn scan<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let mode = self.model.spec.mode;
        for p in 0..self.state.beta.len() {
            if mode.selects() {
                self.update_fixed_indicator(p, rng)?;
            }
            self.update_beta(p, rng)?;
        }
        if !self.model.config.freeze.shrinkage {
            for p in 0..self.state.beta.len() {
                if self.state.fixed_included[p] {
                    self.update_shrinkage(p, rng)?;
                }
            }
        }
        for b in 0..self.state.blocks.len() {
            self.update_block(b, rng)?;
        }
        if !self.model.config.freeze.dispersion {
            self.update_dispersion(rng)?;
        }
        self.scans += 1;
        if self.scans.is_multiple_of(self.model.config.recompute_period) {
            self.refresh_eta();
        }
        Ok(())
    }

    fn refresh_eta(&mut self) {
        let fresh = self.model.eta_of(&self.state);
        let drift = fresh
            .iter()
            .zip(&self.eta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift > DRIFT_TOL {
            self.stats.drift_events += 1;
        }
        if drift > self.stats.max_drift || drift.is_nan() {
            self.stats.max_drift = drift;
        }
        self.eta = fresh;
    }

    fn indicator_probability(&self, currently_on: bool) -> f64 {
        let pi = self.model.prior.hyper.prior_inclusion;
        let l_cur = self.shifted_ll(0.0);
        let l_alt = self.shifted_ll(1.0);
        let (on, off) = if currently_on { (l_cur, l_alt) } else { (l_alt, l_cur) };
        match (on.is_finite(), off.is_finite()) {
            (false, false) => pi,
            (false, true) => 0.0,
            (true, false) => 1.0,
            (true, true) => logistic((pi / (1.0 - pi)).ln() + on - off),
        }
    }

    fn update_fixed_indicator<R: Rng + ?Sized>(&mut self, p: usize, rng: &mut R) -> Result<IndicatorDraw> {
        let cur = self.state.fixed_included[p];
        let sign = if cur { -1.0 } else { 1.0 };
        let beta = self.state.beta[p];
        self.clear_direction();
        for &(i, x) in &self.model.x_cols[p] {
            let d = sign * beta * x;
            if d != 0.0 {
                self.idx.push(i);
                self.val.push(d);
            }
        }
        let prob = self.indicator_probability(cur);
        let new = draw::bernoulli(rng, prob);
        if new != cur {
            self.apply_shift(1.0);
            self.state.fixed_included[p] = new;
        }
        Ok(IndicatorDraw {
            probability: prob,
            included: new,
        })
    }

    fn update_beta<R: Rng + ?Sized>(&mut self, p: usize, rng: &mut R) -> Result<()> {
        let sigma2 = self.state.sigma2(self.model.spec.family);
        let g = self.model.prior.hyper.g_shrink;
        if !self.state.fixed_included[p] {
            // the excluded coefficient and its scales follow the prior jointly
            if !self.model.config.freeze.shrinkage {
                let phi = draw::gamma(rng, 1.0, 1.0);
                self.state.phi[p] = phi;
                self.state.theta[p] = draw::exponential(rng, phi * phi / 2.0).max(f64::MIN_POSITIVE);
            }
            self.state.beta[p] = draw::normal(rng, 0.0, sigma2 / (g * self.state.theta[p]));
            return Ok(());
        }
        let var = sigma2 / (g * self.state.theta[p]);
        self.clear_direction();
        for &(i, x) in &self.model.x_cols[p] {
            self.idx.push(i);
            self.val.push(x);
        }
        let x0 = self.state.beta[p];
        self.state.beta[p] = self.slice_linear(Kind::Beta, x0, var, rng)?;
        Ok(())
    }

    fn update_shrinkage<R: Rng + ?Sized>(&mut self, p: usize, rng: &mut R) -> Result<()> {
        let sigma2 = self.state.sigma2(self.model.spec.family);
        let g = self.model.prior.hyper.g_shrink;
        let beta = self.state.beta[p];
        let phi = self.state.phi[p];
        let rate = g * beta * beta / (2.0 * sigma2) + phi * phi / 2.0;
        let theta = draw::gamma(rng, 1.5, rate);
        self.state.theta[p] = theta;
        self.state.phi[p] = self.slice_log(Kind::LogScale, phi, |t| scale_root_target(t, theta), rng)?;
        Ok(())
    }

    fn update_dispersion<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let opts = &self.model.prior.options;
        match self.model.spec.family {
            FamilyKind::Gaussian => {
                let y = self.model.data.y();
                let link = self.family.link();
                let ssr: f64 = self
                    .eta
                    .iter()
                    .zip(y)
                    .map(|(&e, &yi)| {
                        let r = yi - link.inverse(e);
                        r * r
                    })
                    .sum();
                let g = self.model.prior.hyper.g_shrink;
                let beta_ss: f64 = self
                    .state
                    .beta
                    .iter()
                    .zip(&self.state.theta)
                    .map(|(b, t)| g * t * b * b)
                    .sum();
                let n = y.len() as f64;
                let l = self.state.beta.len() as f64;
                let shape = opts.sigma2_shape + n / 2.0 + l / 2.0;
                let scale = opts.sigma2_scale + ssr / 2.0 + beta_ss / 2.0;
                self.state.dispersion = Some(draw::inverse_gamma(rng, shape, scale));
            }
            FamilyKind::NegativeBinomial => {
                let r0 = self.state.dispersion.unwrap_or(1.0);
                let (a, b) = (opts.dispersion_shape, opts.dispersion_rate);
                let base = self.family;
                let model = self.model;
                let eta = &self.eta;
                let out = slice_update(
                    |t| {
                        let r = t.exp();
                        let fam = base.with_dispersion_unchecked(Some(r));
                        model.ll_sum(&fam, eta) + density::gamma(r, a, b) + t
                    },
                    r0.ln(),
                    self.width(Kind::LogDispersion),
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                    model.config.max_step_outs,
                    rng,
                )?;
                self.note(Kind::LogDispersion, &out);
                self.state.dispersion = Some(out.value.exp());
            }
            FamilyKind::Poisson | FamilyKind::Bernoulli => return Ok(()),
        }
        self.family = self.family.with_dispersion_unchecked(self.state.dispersion);
        Ok(())
    }

    fn update_block<R: Rng + ?Sized>(&mut self, b: usize, rng: &mut R) -> Result<()> {
        let mode = self.model.spec.mode;
        let q = self.state.blocks[b].q();
        for k in 0..q {
            if mode.selects() {
                self.update_random_indicator(b, k, rng)?;
            }
            let hyper = &self.model.prior.hyper;
            if self.state.blocks[b].included[k] {
                self.update_lambda(b, k, rng)?;
                let lambda = self.state.blocks[b].lambda[k];
                self.state.blocks[b].tau2[k] = draw::inverse_gamma(
                    rng,
                    hyper.nu / 2.0 + 0.5,
                    hyper.v / 2.0 + lambda * lambda / (2.0 * hyper.h * hyper.h),
                );
            } else {
                // slab and its variance follow the prior jointly
                let tau2 = draw::inverse_gamma(rng, hyper.nu / 2.0, hyper.v / 2.0);
                self.state.blocks[b].tau2[k] = tau2;
                self.state.blocks[b].lambda[k] = draw::half_normal(rng, tau2 * hyper.h * hyper.h);
            }
        }
        if mode.uses_gamma() && q > 1 {
            for j in 0..q * (q - 1) / 2 {
                self.update_gamma(b, j, rng)?;
            }
        }
        let loading = self.state.blocks[b].effective(mode).loading();
        let n_groups = self.state.blocks[b].n_groups();
        let inert: Vec<bool> = (0..q).map(|k| (k..q).all(|u| loading[u * q + k] == 0.0)).collect();
        for g in 0..n_groups {
            for k in (0..q).filter(|&k| !inert[k]) {
                self.update_xi(b, g, k, &loading, rng)?;
            }
        }
        let scale = self.model.prior.options.xi_scale;
        for k in 0..q {
            if inert[k] {
                // latent column outside the predictor: joint prior draw
                let bs = &mut self.state.blocks[b];
                let m = draw::gamma(rng, 1.0, 1.0);
                let kappa = draw::exponential(rng, m * m / 2.0).max(f64::MIN_POSITIVE);
                bs.m[k] = m;
                bs.kappa[k] = kappa;
                let var = scale.variance(kappa);
                for g in 0..n_groups {
                    bs.xi[g * q + k] = draw::normal(rng, 0.0, var);
                }
            } else {
                self.update_xi_scale(b, k, rng)?;
            }
        }
        Ok(())
    }

    /// Sets the direction to the predictor change from replacing the block's
    /// loading `from` by `to`.
    fn loading_difference(&mut self, b: usize, from: &[f64], to: &[f64]) {
        let design = &self.model.data.blocks()[b];
        let bs = &self.state.blocks[b];
        let q = bs.q();
        let diff: Vec<f64> = to.iter().zip(from).map(|(a, c)| a - c).collect();
        let mut drho = vec![0.0; bs.n_groups() * q];
        for g in 0..bs.n_groups() {
            let xi = bs.xi_row(g);
            for u in 0..q {
                drho[g * q + u] = (0..=u).map(|v| diff[u * q + v] * xi[v]).sum();
            }
        }
        self.clear_direction();
        for i in 0..self.model.data.n_obs() {
            let g = design.group_of(i);
            let z = design.z_row(i);
            let d: f64 = (0..q).map(|u| z[u] * drho[g * q + u]).sum();
            self.push_direction(i, d);
        }
    }

    fn update_random_indicator<R: Rng + ?Sized>(&mut self, b: usize, k: usize, rng: &mut R) -> Result<IndicatorDraw> {
        let mode = self.model.spec.mode;
        let bs = &self.state.blocks[b];
        let cur = bs.included[k];
        let from = bs.effective(mode).loading();
        let mut alt = bs.included.clone();
        alt[k] = !cur;
        let to = bs.effective_with(mode, &alt).loading();
        self.loading_difference(b, &from, &to);
        let prob = self.indicator_probability(cur);
        let new = draw::bernoulli(rng, prob);
        if new != cur {
            self.apply_shift(1.0);
            self.state.blocks[b].included[k] = new;
        }
        Ok(IndicatorDraw {
            probability: prob,
            included: new,
        })
    }

    fn update_lambda<R: Rng + ?Sized>(&mut self, b: usize, k: usize, rng: &mut R) -> Result<()> {
        let mode = self.model.spec.mode;
        let hyper = &self.model.prior.hyper;
        let bs = &self.state.blocks[b];
        let var = bs.tau2[k] * hyper.h * hyper.h;
        let q = bs.q();
        let eff = bs.effective(mode);
        // (Gamma_eff xi_g)_k per group
        let gx: Vec<f64> = (0..bs.n_groups())
            .map(|g| {
                let xi = bs.xi_row(g);
                (0..=k).map(|v| eff.gamma[k * q + v] * xi[v]).sum()
            })
            .collect();
        let design = &self.model.data.blocks()[b];
        self.clear_direction();
        for i in 0..self.model.data.n_obs() {
            let d = design.z_row(i)[k] * gx[design.group_of(i)];
            self.push_direction(i, d);
        }
        let x0 = self.state.blocks[b].lambda[k];
        let value = if x0 > 0.0 {
            self.slice_linear_log(Kind::Lambda, x0, |x| density::half_normal(x, var), rng)?
        } else {
            // an underflowed slab value cannot start a log-axis slice
            self.slice_linear_positive(Kind::Lambda, var, rng)?
        };
        self.state.blocks[b].lambda[k] = value;
        Ok(())
    }

    fn update_gamma<R: Rng + ?Sized>(&mut self, b: usize, j: usize, rng: &mut R) -> Result<()> {
        let gp = self.model.gamma_priors[b]
            .as_ref()
            .expect("gamma prior exists when gamma is sampled");
        let bs = &self.state.blocks[b];
        let r = &bs.gamma;
        let d = r.len();
        let pjj = gp.precision[j * d + j];
        let var = 1.0 / pjj;
        let mut s = 0.0;
        for i in 0..d {
            if i != j {
                s += gp.precision[j * d + i] * (r[i] - gp.mean[i]);
            }
        }
        let mean = gp.mean[j] - var * s;
        let (u, v) = unpack_index(j);
        let eff = bs.effective(self.model.spec.mode);
        if eff.lambda[u] == 0.0 || eff.lambda[v] == 0.0 {
            self.state.blocks[b].gamma[j] = draw::normal(rng, mean, var);
            return Ok(());
        }
        let lambda_u = eff.lambda[u];
        let xiv: Vec<f64> = (0..bs.n_groups()).map(|g| bs.xi_row(g)[v]).collect();
        let design = &self.model.data.blocks()[b];
        self.clear_direction();
        for i in 0..self.model.data.n_obs() {
            let d = design.z_row(i)[u] * lambda_u * xiv[design.group_of(i)];
            self.push_direction(i, d);
        }
        let x0 = self.state.blocks[b].gamma[j];
        let value = self.slice_linear_centred(Kind::Gamma, x0, mean, var, rng)?;
        self.state.blocks[b].gamma[j] = value;
        Ok(())
    }

    fn update_xi<R: Rng + ?Sized>(&mut self, b: usize, g: usize, k: usize, loading: &[f64], rng: &mut R) -> Result<()> {
        let bs = &self.state.blocks[b];
        let q = bs.q();
        let var = self.model.prior.options.xi_scale.variance(bs.kappa[k]);
        let column: Vec<f64> = (0..q).map(|u| loading[u * q + k]).collect();
        let design = &self.model.data.blocks()[b];
        self.clear_direction();
        for &i in design.members(g) {
            let z = design.z_row(i);
            let d: f64 = (k..q).map(|u| z[u] * column[u]).sum();
            self.push_direction(i, d);
        }
        let x0 = self.state.blocks[b].xi[g * q + k];
        let value = self.slice_linear(Kind::Xi, x0, var, rng)?;
        self.state.blocks[b].xi[g * q + k] = value;
        Ok(())
    }

    fn update_xi_scale<R: Rng + ?Sized>(&mut self, b: usize, k: usize, rng: &mut R) -> Result<()> {
        let bs = &self.state.blocks[b];
        let q = bs.q();
        let n = bs.n_groups() as f64;
        let ss: f64 = (0..bs.n_groups()).map(|g| bs.xi[g * q + k].powi(2)).sum();
        let scale = self.model.prior.options.xi_scale;
        let (kappa0, m) = (bs.kappa[k], bs.m[k]);
        let rate = m * m / 2.0;
        let kappa = self.slice_log(
            Kind::LogScale,
            kappa0,
            |t| {
                let kappa = t.exp();
                let lvar = match scale {
                    XiScale::Variance => t,
                    XiScale::StdDev => 2.0 * t,
                };
                -0.5 * n * lvar - ss / (2.0 * lvar.exp()) - rate * kappa + t
            },
            rng,
        )?;
        self.state.blocks[b].kappa[k] = kappa;
        let m0 = self.state.blocks[b].m[k];
        let m = self.slice_log(Kind::LogScale, m0, |t| scale_root_target(t, kappa), rng)?;
        self.state.blocks[b].m[k] = m;
        Ok(())
    }

    pub fn record(&self, iteration: usize) -> Result<Draw> {
        let ll = self.log_likelihood();
        let lp = ll + priors::log_prior_state(&self.state, &self.model.prior, &self.model.dims)?;
        Ok(Draw::from_state(&self.state, self.model.spec.mode, iteration, ll, lp))
    }
}

/// Log-density on `t = ln x` of `x ~ Gamma(1, 1)` given
/// `s ~ Exp(rate = x^2 / 2)`, with Jacobian.
fn scale_root_target(t: f64, s: f64) -> f64 {
    let x = t.exp();
    (2.0 * t - std::f64::consts::LN_2) - s * x * x / 2.0 - x + t
}

/// Checks that every excluded random effect has zero covariance row and
/// column and contributes nothing to the predictor.
pub fn check_constraints(state: &ParameterState, mode: SelectionMode) -> Result<()> {
    for (b, block) in state.blocks.iter().enumerate() {
        let eff = block.effective(mode);
        let q = eff.q();
        let omega = crate::reparam::assemble_covariance(&eff);
        let loading = eff.loading();
        for k in (0..q).filter(|&k| !block.included[k]) {
            let bad = eff.lambda[k] != 0.0
                || (0..q).any(|j| {
                    omega[k * q + j] != 0.0
                        || omega[j * q + k] != 0.0
                        || loading[k * q + j] != 0.0
                        || loading[j * q + k] != 0.0
                });
            if bad {
                return Err(Error::Invariant(format!(
                    "excluded effect {k} of block {b} has a nonzero covariance or loading entry"
                )));
            }
        }
    }
    Ok(())
}

/// Which indicator to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndicatorTarget {
    Fixed(usize),
    Random { block: usize, effect: usize },
}

/// Full-conditional inclusion probability and the value drawn from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndicatorDraw {
    pub probability: f64,
    pub included: bool,
}

/// Prior draw accepted as a chain start, as used by the sampler.
pub fn initial_state<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, rng: &mut R) -> Result<ParameterState> {
    let model = Model::new(spec, data, &spec.sampler)?;
    Ok(model.initial_state(rng)?.0)
}

/// One full scan from `state` using `spec.sampler` for widths and freezes.
pub fn gibbs_scan<R: Rng + ?Sized>(
    state: &ParameterState,
    spec: &ModelSpec,
    data: &Dataset,
    rng: &mut R,
) -> Result<ParameterState> {
    let model = Model::new(spec, data, &spec.sampler)?;
    let mut chain = Chain::new(&model, state.clone())?;
    chain.scan(rng)?;
    Ok(chain.state)
}

/// Draws one indicator from its full conditional, updating `state` in place.
pub fn update_indicator<R: Rng + ?Sized>(
    target: IndicatorTarget,
    state: &mut ParameterState,
    spec: &ModelSpec,
    data: &Dataset,
    rng: &mut R,
) -> Result<IndicatorDraw> {
    let model = Model::new(spec, data, &spec.sampler)?;
    let mut chain = Chain::new(&model, state.clone())?;
    let out = match target {
        IndicatorTarget::Fixed(p) => {
            if p >= chain.state.beta.len() {
                return Err(Error::Config(format!("no fixed effect {p}")));
            }
            chain.update_fixed_indicator(p, rng)?
        }
        IndicatorTarget::Random { block, effect } => {
            if block >= chain.state.blocks.len() || effect >= chain.state.blocks[block].q() {
                return Err(Error::Config(format!("no random effect {effect} in block {block}")));
            }
            chain.update_random_indicator(block, effect, rng)?
        }
    };
    *state = chain.state;
    Ok(out)
}
