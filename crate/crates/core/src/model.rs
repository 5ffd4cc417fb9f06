//! Generalized linear mixed model: response families, links, datasets, the
//! declarative model spec, sampler state, and likelihood evaluation.
//!
//! The linear predictor uses the reparameterized random-effect form
//! `eta = offset + x' (J * beta) + sum_b z_b' Lambda_b Gamma_b xi_{b,g}`, where
//! `Lambda_b` and `Gamma_b` are the *effective* factors produced by
//! [`crate::reparam::project_constraints`].

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result, ValidationErrors};
use crate::priors::PriorOptions;
use crate::reparam::{self, CholeskyFactors, EffectiveFactors};
use crate::sampler::SamplerConfig;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Poisson,
    NegativeBinomial,
    Bernoulli,
    Gaussian,
}

impl FamilyKind {
    pub fn canonical_link(self) -> Link {
        match self {
            FamilyKind::Poisson | FamilyKind::NegativeBinomial => Link::Log,
            FamilyKind::Bernoulli => Link::Logit,
            FamilyKind::Gaussian => Link::Identity,
        }
    }

    pub fn has_dispersion(self) -> bool {
        matches!(self, FamilyKind::NegativeBinomial | FamilyKind::Gaussian)
    }

    pub fn is_count(self) -> bool {
        !matches!(self, FamilyKind::Gaussian)
    }

    pub fn supports(self, link: Link) -> bool {
        match self {
            FamilyKind::Poisson | FamilyKind::NegativeBinomial => {
                matches!(link, Link::Log | Link::Identity)
            }
            FamilyKind::Bernoulli => true,
            FamilyKind::Gaussian => matches!(link, Link::Identity | Link::Log),
        }
    }

    /// Checks a single response value against the family's support.
    pub fn validate_response(self, y: f64) -> std::result::Result<(), String> {
        if !y.is_finite() {
            return Err(format!("response {y} is not finite"));
        }
        match self {
            FamilyKind::Poisson | FamilyKind::NegativeBinomial => {
                if y < 0.0 || y.fract() != 0.0 {
                    return Err(format!("response {y} is not a nonnegative integer count"));
                }
            }
            FamilyKind::Bernoulli => {
                if y != 0.0 && y != 1.0 {
                    return Err(format!("response {y} is not 0 or 1"));
                }
            }
            FamilyKind::Gaussian => {}
        }
        Ok(())
    }
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyKind::Poisson => "poisson",
            FamilyKind::NegativeBinomial => "negative-binomial",
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Log,
    Logit,
    Identity,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Log => eta.exp(),
            Link::Logit => logistic(eta),
            Link::Identity => eta,
        }
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(y!)`, summed exactly for small counts.
pub(crate) fn ln_factorial(y: f64) -> f64 {
    if y <= 30.0 {
        (2..=y as u32).map(|k| f64::from(k).ln()).sum()
    } else {
        ln_gamma(y + 1.0)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Response distribution with its link and current dispersion.
///
/// Negative-binomial uses mean `mu` and overdispersion `r` with
/// `Var = mu + mu^2 / r`; gaussian carries the residual variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Family {
    kind: FamilyKind,
    link: Link,
    dispersion: Option<f64>,
}

impl Family {
    pub fn new(kind: FamilyKind, link: Option<Link>, dispersion: Option<f64>) -> Result<Self> {
        let link = link.unwrap_or_else(|| kind.canonical_link());
        if !kind.supports(link) {
            return Err(Error::Config(format!(
                "link {link:?} is not supported for family {kind}"
            )));
        }
        match (kind.has_dispersion(), dispersion) {
            (true, Some(d)) if d > 0.0 && d.is_finite() => {}
            (true, Some(d)) => return Err(Error::Config(format!("dispersion must be positive, got {d}"))),
            (true, None) => return Err(Error::Config(format!("family {kind} requires a dispersion"))),
            (false, Some(_)) => return Err(Error::Config(format!("family {kind} takes no dispersion"))),
            (false, None) => {}
        }
        Ok(Family { kind, link, dispersion })
    }

    pub fn poisson() -> Self {
        Family {
            kind: FamilyKind::Poisson,
            link: Link::Log,
            dispersion: None,
        }
    }

    pub fn negative_binomial(r: f64) -> Result<Self> {
        Family::new(FamilyKind::NegativeBinomial, None, Some(r))
    }

    pub fn bernoulli() -> Self {
        Family {
            kind: FamilyKind::Bernoulli,
            link: Link::Logit,
            dispersion: None,
        }
    }

    pub fn gaussian(variance: f64) -> Result<Self> {
        Family::new(FamilyKind::Gaussian, None, Some(variance))
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn dispersion(&self) -> Option<f64> {
        self.dispersion
    }

    pub(crate) fn with_dispersion_unchecked(mut self, dispersion: Option<f64>) -> Self {
        self.dispersion = dispersion;
        self
    }

    /// `log f(y | mu = g^-1(eta))`. Returns `-inf` when the mean sits on a
    /// boundary that contradicts `y`.
    pub fn log_likelihood(&self, y: f64, eta: f64) -> Result<f64> {
        if eta.is_nan() {
            return Err(Error::Numeric("linear predictor is NaN".into()));
        }
        self.kind.validate_response(y).map_err(Error::Domain)?;
        Ok(self.log_likelihood_with_const(y, eta, self.response_constant(y)))
    }

    /// Part of the log-likelihood that depends only on `y` (and not on the
    /// dispersion), cached by the sampler.
    pub(crate) fn response_constant(&self, y: f64) -> f64 {
        match self.kind {
            FamilyKind::Poisson | FamilyKind::NegativeBinomial => -ln_factorial(y),
            FamilyKind::Bernoulli | FamilyKind::Gaussian => 0.0,
        }
    }

    pub(crate) fn log_likelihood_with_const(&self, y: f64, eta: f64, constant: f64) -> f64 {
        match self.kind {
            FamilyKind::Poisson => match self.link {
                Link::Log => y * eta - eta.exp() + constant,
                _ => {
                    let mu = self.link.inverse(eta);
                    if mu > 0.0 {
                        y * mu.ln() - mu + constant
                    } else if mu == 0.0 && y == 0.0 {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                }
            },
            FamilyKind::NegativeBinomial => {
                let r = self.dispersion.unwrap_or(1.0);
                let (ln_mu, mu) = match self.link {
                    Link::Log => (eta, eta.exp()),
                    _ => {
                        let mu = self.link.inverse(eta);
                        if mu < 0.0 || (mu == 0.0 && y > 0.0) {
                            return f64::NEG_INFINITY;
                        }
                        (mu.ln(), mu)
                    }
                };
                if mu == 0.0 {
                    return 0.0;
                }
                // log(r + mu) evaluated stably for large eta
                let ln_r_mu = if ln_mu > r.ln() {
                    ln_mu + (r / mu).ln_1p()
                } else {
                    r.ln() + (mu / r).ln_1p()
                };
                let mut ll = r * (r.ln() - ln_r_mu) + constant;
                if y > 0.0 {
                    ll += ln_gamma(y + r) - ln_gamma(r) + y * (ln_mu - ln_r_mu);
                }
                ll
            }
            FamilyKind::Bernoulli => match self.link {
                Link::Logit => y * eta - softplus(eta),
                _ => {
                    let mu = self.link.inverse(eta);
                    if !(0.0..=1.0).contains(&mu) {
                        return f64::NEG_INFINITY;
                    }
                    if y == 1.0 {
                        mu.ln()
                    } else {
                        (1.0 - mu).ln()
                    }
                }
            },
            FamilyKind::Gaussian => {
                let s2 = self.dispersion.unwrap_or(1.0);
                let mu = self.link.inverse(eta);
                let d = y - mu;
                -0.5 * (LN_2PI + s2.ln()) - d * d / (2.0 * s2)
            }
        }
    }

    /// Draws a response at linear predictor `eta`.
    pub fn sample<R: Rng + ?Sized>(&self, eta: f64, rng: &mut R) -> Result<f64> {
        let mu = self.link.inverse(eta);
        let bad = |what: &str| Error::Numeric(format!("cannot sample {what} with mean {mu}"));
        match self.kind {
            FamilyKind::Poisson => poisson_draw(mu, rng).ok_or_else(|| bad("poisson")),
            FamilyKind::NegativeBinomial => {
                let r = self.dispersion.unwrap_or(1.0);
                if !(mu >= 0.0) || !mu.is_finite() {
                    return Err(bad("negative-binomial"));
                }
                if mu == 0.0 {
                    return Ok(0.0);
                }
                let rate = Gamma::new(r, mu / r).map_err(|_| bad("negative-binomial"))?.sample(rng);
                poisson_draw(rate, rng).ok_or_else(|| bad("negative-binomial"))
            }
            FamilyKind::Bernoulli => {
                let b = Bernoulli::new(mu).map_err(|_| bad("bernoulli"))?;
                Ok(if b.sample(rng) { 1.0 } else { 0.0 })
            }
            FamilyKind::Gaussian => {
                let sd = self.dispersion.unwrap_or(1.0).sqrt();
                let n = Normal::new(mu, sd).map_err(|_| bad("gaussian"))?;
                Ok(n.sample(rng))
            }
        }
    }
}

fn poisson_draw<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> Option<f64> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return None;
    }
    if mu == 0.0 {
        return Some(0.0);
    }
    Poisson::new(mu).ok().map(|p| p.sample(rng))
}

/// Free-function form of [`Family::log_likelihood`].
pub fn log_likelihood(family: &Family, y: f64, eta: f64) -> Result<f64> {
    family.log_likelihood(y, eta)
}

/// Design and grouping for one random-effect block.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomDesign {
    q: usize,
    /// `n_obs x q`, row-major.
    z: Vec<f64>,
    group: Vec<usize>,
    members: Vec<Vec<usize>>,
    labels: Vec<String>,
}

impl RandomDesign {
    /// `group[obs]` must be a dense index `0..n_groups`. Labels default to
    /// the index.
    pub fn new(z: Vec<f64>, q: usize, group: Vec<usize>, labels: Option<Vec<String>>) -> Result<Self> {
        if q == 0 {
            return Err(Error::Config("random block needs at least one column".into()));
        }
        if z.len() != group.len() * q {
            return Err(Error::Config(format!(
                "random design has {} values, expected {} x {q}",
                z.len(),
                group.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("random design contains a non-finite value".into()));
        }
        let n_groups = group.iter().map(|g| g + 1).max().unwrap_or(0);
        let mut members = vec![Vec::new(); n_groups];
        for (obs, &g) in group.iter().enumerate() {
            members[g].push(obs);
        }
        if members.iter().any(|m| m.is_empty()) {
            return Err(Error::Config(
                "group indices must be dense (a group has no observations)".into(),
            ));
        }
        let labels = match labels {
            Some(l) if l.len() == n_groups => l,
            Some(l) => return Err(Error::Config(format!("{} group labels for {n_groups} groups", l.len()))),
            None => (0..n_groups).map(|g| g.to_string()).collect(),
        };
        Ok(RandomDesign {
            q,
            z,
            group,
            members,
            labels,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_groups(&self) -> usize {
        self.members.len()
    }

    pub fn group_of(&self, obs: usize) -> usize {
        self.group[obs]
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn z_row(&self, obs: usize) -> &[f64] {
        &self.z[obs * self.q..(obs + 1) * self.q]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Observations with fixed design, random-effect blocks and optional offset.
/// Read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    l: usize,
    /// `n_obs x l`, row-major.
    x: Vec<f64>,
    blocks: Vec<RandomDesign>,
    offset: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        l: usize,
        blocks: Vec<RandomDesign>,
        offset: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if x.len() != n * l {
            return Err(Error::Config(format!(
                "fixed design has {} values, expected {n} x {l}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("fixed design contains a non-finite value".into()));
        }
        for (b, block) in blocks.iter().enumerate() {
            if block.group.len() != n {
                return Err(Error::Config(format!(
                    "random block {b} covers {} observations, dataset has {n}",
                    block.group.len()
                )));
            }
        }
        if let Some(o) = &offset {
            if o.len() != n {
                return Err(Error::Config(format!("offset has {} values, expected {n}", o.len())));
            }
            if o.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("offset contains a non-finite value".into()));
            }
        }
        Ok(Dataset {
            y,
            l,
            x,
            blocks,
            offset,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.l
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_row(&self, obs: usize) -> &[f64] {
        &self.x[obs * self.l..(obs + 1) * self.l]
    }

    pub fn x(&self, obs: usize, p: usize) -> f64 {
        self.x[obs * self.l + p]
    }

    pub fn blocks(&self) -> &[RandomDesign] {
        &self.blocks
    }

    pub fn offset(&self, obs: usize) -> f64 {
        self.offset.as_ref().map_or(0.0, |o| o[obs])
    }

    pub fn has_offset(&self) -> bool {
        self.offset.is_some()
    }

    /// Same design with a different response vector.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.y.len() {
            return Err(Error::Config("replacement response has the wrong length".into()));
        }
        Ok(Dataset { y, ..self.clone() })
    }

    pub fn validate_for(&self, kind: FamilyKind) -> Result<()> {
        for (i, &y) in self.y.iter().enumerate() {
            kind.validate_response(y)
                .map_err(|m| Error::Domain(format!("observation {i}: {m}")))?;
        }
        Ok(())
    }

    /// FNV-1a over every stored bit pattern; stable across runs and platforms.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(self.y.len() as u64);
        feed(self.l as u64);
        for v in self.y.iter().chain(&self.x) {
            feed(v.to_bits());
        }
        for b in &self.blocks {
            feed(b.q as u64);
            for v in &b.z {
                feed(v.to_bits());
            }
            for &g in &b.group {
                feed(g as u64);
            }
        }
        if let Some(o) = &self.offset {
            for v in o {
                feed(v.to_bits());
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Indicators on fixed and random effects, full lower-triangular Gamma.
    SsvsFull,
    /// Indicators on fixed and random effects, Gamma fixed to the identity.
    SsvsDiagonal,
    /// All indicators fixed at 1.
    NoSelection,
}

impl SelectionMode {
    pub fn selects(self) -> bool {
        self != SelectionMode::NoSelection
    }

    pub fn uses_gamma(self) -> bool {
        self != SelectionMode::SsvsDiagonal
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::SsvsFull => "full",
            SelectionMode::SsvsDiagonal => "diagonal",
            SelectionMode::NoSelection => "basic",
        }
    }
}

fn default_h() -> f64 {
    1.0
}
fn default_v() -> f64 {
    0.01
}
fn default_one() -> f64 {
    1.0
}
fn default_half() -> f64 {
    0.5
}

/// Prior hyperparameters. `tau_k^2 ~ IG(nu / 2, v / 2)` and the slab is
/// `N+(0, tau_k^2 h^2)`; `g_shrink` divides the fixed-effect prior variance;
/// `prior_inclusion` is the Bernoulli probability that an indicator is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_v")]
    pub v: f64,
    #[serde(default = "default_v")]
    pub nu: f64,
    #[serde(default = "default_one")]
    pub g_shrink: f64,
    #[serde(default = "default_half")]
    pub prior_inclusion: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            h: default_h(),
            v: default_v(),
            nu: default_v(),
            g_shrink: default_one(),
            prior_inclusion: default_half(),
        }
    }
}

impl Hyperparameters {
    pub fn with_grid_point(self, h: f64, v: f64) -> Self {
        Hyperparameters { h, v, nu: v, ..self }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, val) in [
            ("h", self.h),
            ("v", self.v),
            ("nu", self.nu),
            ("g_shrink", self.g_shrink),
        ] {
            if !(val > 0.0 && val.is_finite()) {
                out.push(format!("hyperparameter {name} must be positive and finite, got {val}"));
            }
        }
        if !(self.prior_inclusion > 0.0 && self.prior_inclusion < 1.0) {
            out.push(format!(
                "prior_inclusion must lie in (0, 1), got {}",
                self.prior_inclusion
            ));
        }
        out
    }
}

/// Name of the implicit constant column in fixed and random designs.
pub const INTERCEPT: &str = "(Intercept)";

pub fn is_intercept(name: &str) -> bool {
    name == INTERCEPT || name == "1"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBlockSpec {
    /// Grouping column.
    pub group: String,
    /// Random design columns; `(Intercept)` is the constant column.
    pub columns: Vec<String>,
}

fn default_mode() -> SelectionMode {
    SelectionMode::SsvsFull
}

/// Declarative model description, the JSON document accepted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: FamilyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<Link>,
    pub response: String,
    pub fixed: Vec<String>,
    #[serde(default)]
    pub random: Vec<RandomBlockSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<String>,
    #[serde(default)]
    pub hyper: Hyperparameters,
    #[serde(default)]
    pub priors: PriorOptions,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_mode")]
    pub mode: SelectionMode,
}

impl ModelSpec {
    /// Minimal spec with defaults for everything but the columns.
    pub fn new(family: FamilyKind, response: &str, fixed: &[&str], random: Vec<RandomBlockSpec>) -> Self {
        ModelSpec {
            family,
            link: None,
            response: response.to_string(),
            fixed: fixed.iter().map(|s| s.to_string()).collect(),
            random,
            offset: None,
            hyper: Hyperparameters::default(),
            priors: PriorOptions::default(),
            sampler: SamplerConfig::default(),
            mode: SelectionMode::SsvsFull,
        }
    }

    pub fn link(&self) -> Link {
        self.link.unwrap_or_else(|| self.family.canonical_link())
    }

    /// Family with a placeholder dispersion of 1 where one is required.
    pub fn base_family(&self) -> Result<Family> {
        let disp = self.family.has_dispersion().then_some(1.0);
        Family::new(self.family, self.link, disp)
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.family.supports(self.link()) {
            problems.push(format!(
                "link {:?} is not supported for family {}",
                self.link(),
                self.family
            ));
        }
        if self.response.trim().is_empty() {
            problems.push("response column name is empty".into());
        }
        if self.fixed.is_empty() {
            problems.push("at least one fixed-effect column is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.fixed {
            let key = if is_intercept(c) { INTERCEPT } else { c.as_str() };
            if !seen.insert(key) {
                problems.push(format!("duplicate fixed-effect column '{c}'"));
            }
        }
        for (b, block) in self.random.iter().enumerate() {
            if block.columns.is_empty() {
                problems.push(format!("random block {b} ('{}') has no columns", block.group));
            }
            let mut seen = std::collections::HashSet::new();
            for c in &block.columns {
                let key = if is_intercept(c) { INTERCEPT } else { c.as_str() };
                if !seen.insert(key) {
                    problems.push(format!("duplicate column '{c}' in random block {b}"));
                }
            }
        }
        problems.extend(self.hyper.problems());
        problems.extend(self.priors.problems());
        problems.extend(self.sampler.problems());
        if self.sampler.kept == 0 {
            problems.push("sampler.kept must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(ValidationErrors(problems)))
        }
    }
}

/// Sizes needed to lay out a [`ParameterState`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub family: FamilyKind,
    pub mode: SelectionMode,
    pub n_fixed: usize,
    pub blocks: Vec<BlockDims>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub q: usize,
    pub n_groups: usize,
}

impl ModelDims {
    pub fn of(spec: &ModelSpec, data: &Dataset) -> Self {
        ModelDims {
            family: spec.family,
            mode: spec.mode,
            n_fixed: data.n_fixed(),
            blocks: data
                .blocks()
                .iter()
                .map(|b| BlockDims {
                    q: b.q(),
                    n_groups: b.n_groups(),
                })
                .collect(),
        }
    }
}

/// Random-effect block of the sampler state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    /// Raw slab values, `>= 0`.
    pub lambda: Vec<f64>,
    pub included: Vec<bool>,
    /// Raw subdiagonal entries of Gamma, packed (2,1), (3,1), (3,2), ...
    pub gamma: Vec<f64>,
    /// Latent effects, `n_groups x q` row-major.
    pub xi: Vec<f64>,
    /// Prior scale of each xi column.
    pub kappa: Vec<f64>,
    pub m: Vec<f64>,
    /// Slab variances.
    pub tau2: Vec<f64>,
}

impl BlockState {
    pub fn q(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_groups(&self) -> usize {
        self.xi.len().checked_div(self.q()).unwrap_or(0)
    }

    pub fn xi_row(&self, group: usize) -> &[f64] {
        let q = self.q();
        &self.xi[group * q..(group + 1) * q]
    }

    pub fn factors(&self) -> CholeskyFactors {
        CholeskyFactors {
            lambda: self.lambda.clone(),
            gamma: self.gamma.clone(),
        }
    }

    /// Effective factors under `mode`: Gamma is the identity in diagonal mode.
    pub fn effective(&self, mode: SelectionMode) -> EffectiveFactors {
        self.effective_with(mode, &self.included)
    }

    /// Effective factors for an alternative indicator vector.
    pub fn effective_with(&self, mode: SelectionMode, included: &[bool]) -> EffectiveFactors {
        if mode.uses_gamma() {
            reparam::project_constraints(&self.factors(), included)
        } else {
            let diag = CholeskyFactors {
                lambda: self.lambda.clone(),
                gamma: vec![0.0; self.gamma.len()],
            };
            reparam::project_constraints(&diag, included)
        }
    }
}

/// One point in the sampler's state space. Raw values are kept for excluded
/// effects; effective values are always derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    pub fixed_included: Vec<bool>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub blocks: Vec<BlockState>,
    /// Negative-binomial overdispersion or gaussian residual variance.
    pub dispersion: Option<f64>,
}

impl ParameterState {
    /// Residual variance entering the fixed-effect prior; 1 unless gaussian.
    pub fn sigma2(&self, kind: FamilyKind) -> f64 {
        match kind {
            FamilyKind::Gaussian => self.dispersion.unwrap_or(1.0),
            _ => 1.0,
        }
    }

    pub fn effective_beta(&self) -> Vec<f64> {
        self.beta
            .iter()
            .zip(&self.fixed_included)
            .map(|(&b, &j)| if j { b } else { 0.0 })
            .collect()
    }

    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        let l = dims.n_fixed;
        let bad = |what: String| Err(Error::Config(format!("state dimension mismatch: {what}")));
        if self.beta.len() != l || self.fixed_included.len() != l || self.theta.len() != l || self.phi.len() != l {
            return bad(format!("fixed effects expect length {l}"));
        }
        if self.blocks.len() != dims.blocks.len() {
            return bad(format!(
                "{} random blocks in state, {} in model",
                self.blocks.len(),
                dims.blocks.len()
            ));
        }
        for (b, (bs, bd)) in self.blocks.iter().zip(&dims.blocks).enumerate() {
            let q = bd.q;
            if bs.lambda.len() != q
                || bs.included.len() != q
                || bs.kappa.len() != q
                || bs.m.len() != q
                || bs.tau2.len() != q
                || bs.gamma.len() != q * (q - 1) / 2
                || bs.xi.len() != q * bd.n_groups
            {
                return bad(format!("block {b} expects q = {q}, {} groups", bd.n_groups));
            }
        }
        if dims.family.has_dispersion() != self.dispersion.is_some() {
            return bad("dispersion presence does not match family".into());
        }
        Ok(())
    }
}

/// Effective quantities of a state, precomputed for predictor evaluation.
#[derive(Debug, Clone)]
pub struct EffectiveState {
    pub beta: Vec<f64>,
    /// Per block, `Lambda_eff Gamma_eff` as a row-major `q x q` matrix.
    pub loadings: Vec<Vec<f64>>,
    pub factors: Vec<EffectiveFactors>,
}

impl EffectiveState {
    pub fn new(state: &ParameterState, mode: SelectionMode) -> Self {
        let factors: Vec<EffectiveFactors> = state.blocks.iter().map(|b| b.effective(mode)).collect();
        EffectiveState {
            beta: state.effective_beta(),
            loadings: factors.iter().map(|f| f.loading()).collect(),
            factors,
        }
    }

    /// Random-effect vector of `group` in `block`.
    pub fn random_effect(&self, state: &ParameterState, block: usize, group: usize) -> Vec<f64> {
        let bs = &state.blocks[block];
        let q = bs.q();
        let l = &self.loadings[block];
        let xi = bs.xi_row(group);
        (0..q).map(|u| (0..=u).map(|v| l[u * q + v] * xi[v]).sum()).collect()
    }

    pub fn eta(&self, state: &ParameterState, data: &Dataset, obs: usize) -> f64 {
        let mut eta = data.offset(obs);
        for (x, b) in data.x_row(obs).iter().zip(&self.beta) {
            eta += x * b;
        }
        for (bi, block) in data.blocks().iter().enumerate() {
            let q = block.q();
            let g = block.group_of(obs);
            let xi = state.blocks[bi].xi_row(g);
            let l = &self.loadings[bi];
            let z = block.z_row(obs);
            for u in 0..q {
                if z[u] == 0.0 {
                    continue;
                }
                let mut rho = 0.0;
                for v in 0..=u {
                    rho += l[u * q + v] * xi[v];
                }
                eta += z[u] * rho;
            }
        }
        eta
    }
}

fn check_state(spec: &ModelSpec, state: &ParameterState, data: &Dataset) -> Result<()> {
    state.check_dims(&ModelDims::of(spec, data))
}

/// Linear predictor of one observation from effective values.
pub fn linear_predictor(spec: &ModelSpec, state: &ParameterState, data: &Dataset, obs: usize) -> Result<f64> {
    check_state(spec, state, data)?;
    if obs >= data.n_obs() {
        return Err(Error::Config(format!(
            "observation {obs} out of range ({} observations)",
            data.n_obs()
        )));
    }
    Ok(EffectiveState::new(state, spec.mode).eta(state, data, obs))
}

fn state_family(spec: &ModelSpec, state: &ParameterState) -> Result<Family> {
    Ok(spec.base_family()?.with_dispersion_unchecked(state.dispersion))
}

/// Sum of observation log-likelihoods, in observation order.
pub fn total_log_likelihood(spec: &ModelSpec, state: &ParameterState, data: &Dataset) -> Result<f64> {
    check_state(spec, state, data)?;
    let family = state_family(spec, state)?;
    let eff = EffectiveState::new(state, spec.mode);
    let mut total = 0.0;
    for (obs, &y) in data.y().iter().enumerate() {
        total += family.log_likelihood(y, eff.eta(state, data, obs))?;
    }
    Ok(total)
}

/// Log-likelihood of the observations belonging to one group of one block:
/// the only terms that change when that group's latent effects move.
pub fn group_log_likelihood(
    spec: &ModelSpec,
    state: &ParameterState,
    data: &Dataset,
    block: usize,
    group: usize,
) -> Result<f64> {
    check_state(spec, state, data)?;
    let design = data
        .blocks()
        .get(block)
        .ok_or_else(|| Error::Config(format!("no random block {block}")))?;
    if group >= design.n_groups() {
        return Err(Error::Config(format!("no group {group} in block {block}")));
    }
    let family = state_family(spec, state)?;
    let eff = EffectiveState::new(state, spec.mode);
    let mut total = 0.0;
    for &obs in design.members(group) {
        total += family.log_likelihood(data.y()[obs], eff.eta(state, data, obs))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_block_state(l: usize, q: usize, groups: usize) -> ParameterState {
        ParameterState {
            beta: vec![0.0; l],
            fixed_included: vec![true; l],
            theta: vec![1.0; l],
            phi: vec![1.0; l],
            blocks: vec![BlockState {
                lambda: vec![0.0; q],
                included: vec![true; q],
                gamma: vec![0.0; q * (q - 1) / 2],
                xi: vec![0.0; q * groups],
                kappa: vec![1.0; q],
                m: vec![1.0; q],
                tau2: vec![1.0; q],
            }],
            dispersion: None,
        }
    }

    fn intercept_data(y: Vec<f64>, groups: Vec<usize>) -> Dataset {
        let n = y.len();
        let block = RandomDesign::new(vec![1.0; n], 1, groups, None).unwrap();
        Dataset::new(y, vec![1.0; n], 1, vec![block], None).unwrap()
    }

    fn spec() -> ModelSpec {
        ModelSpec::new(
            FamilyKind::Poisson,
            "y",
            &[INTERCEPT],
            vec![RandomBlockSpec {
                group: "g".into(),
                columns: vec![INTERCEPT.into()],
            }],
        )
    }

    #[test]
    fn zero_state_gives_zero_predictor() {
        let data = intercept_data(vec![1.0, 2.0], vec![0, 1]);
        let state = one_block_state(1, 1, 2);
        assert_eq!(linear_predictor(&spec(), &state, &data, 0).unwrap(), 0.0);
    }

    #[test]
    fn intercept_only_predictor() {
        let data = Dataset::new(vec![3.0], vec![1.0], 1, vec![], None).unwrap();
        let mut spec = spec();
        spec.random.clear();
        let mut state = one_block_state(1, 1, 1);
        state.blocks.clear();
        state.beta[0] = 2.0;
        assert_eq!(linear_predictor(&spec, &state, &data, 0).unwrap(), 2.0);
    }

    #[test]
    fn random_intercept_product() {
        let data = intercept_data(vec![1.0], vec![0]);
        let mut state = one_block_state(1, 1, 1);
        state.beta[0] = 5.0;
        state.fixed_included[0] = false;
        state.blocks[0].lambda[0] = 0.3;
        state.blocks[0].xi[0] = 2.0;
        let eta = linear_predictor(&spec(), &state, &data, 0).unwrap();
        assert_abs_diff_eq!(eta, 0.6, epsilon = 1e-15);
    }

    #[test]
    fn offset_is_added() {
        let data = Dataset::new(vec![1.0], vec![1.0], 1, vec![], Some(vec![0.25])).unwrap();
        let mut spec = spec();
        spec.random.clear();
        let mut state = one_block_state(1, 1, 1);
        state.blocks.clear();
        state.beta[0] = 1.0;
        assert_abs_diff_eq!(linear_predictor(&spec, &state, &data, 0).unwrap(), 1.25);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let data = intercept_data(vec![1.0], vec![0]);
        let mut state = one_block_state(1, 1, 1);
        state.beta.push(0.0);
        assert!(matches!(
            linear_predictor(&spec(), &state, &data, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn poisson_log_likelihood_values() {
        let f = Family::poisson();
        assert_abs_diff_eq!(f.log_likelihood(0.0, 0.0).unwrap(), -1.0, epsilon = 1e-15);
        // 2 log 2 - 2 - log 2!
        let oracle = 2.0 * 2f64.ln() - 2.0 - 2f64.ln();
        assert_abs_diff_eq!(f.log_likelihood(2.0, 2f64.ln()).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, -1.306_852_819_440_054_7, epsilon = 1e-12);
    }

    #[test]
    fn negative_binomial_zero_count() {
        let f = Family::negative_binomial(1.0).unwrap();
        let ll = f.log_likelihood(0.0, 0.0).unwrap();
        assert_abs_diff_eq!(ll, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn negative_binomial_matches_pmf() {
        // pmf = Gamma(y+r)/(Gamma(r) y!) (r/(r+mu))^r (mu/(r+mu))^y
        let (r, mu, y) = (2.5f64, 3.0f64, 4.0f64);
        let pmf =
            (ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0) + r * (r / (r + mu)).ln() + y * (mu / (r + mu)).ln())
                .exp();
        let f = Family::negative_binomial(r).unwrap();
        assert_abs_diff_eq!(f.log_likelihood(y, mu.ln()).unwrap().exp(), pmf, epsilon = 1e-12);
    }

    #[test]
    fn negative_binomial_sums_to_one() {
        let f = Family::negative_binomial(0.7).unwrap();
        let total: f64 = (0..4000).map(|y| f.log_likelihood(y as f64, 1.5).unwrap().exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn bernoulli_boundaries_are_negative_infinity() {
        let f = Family::new(FamilyKind::Bernoulli, Some(Link::Identity), None).unwrap();
        assert_eq!(f.log_likelihood(1.0, 0.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(f.log_likelihood(0.0, 0.0).unwrap(), 0.0);
        let logit = Family::bernoulli();
        assert_abs_diff_eq!(logit.log_likelihood(1.0, 0.0).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        assert!(logit.log_likelihood(0.0, 800.0).unwrap().is_finite());
    }

    #[test]
    fn errors_on_nan_and_bad_link() {
        assert!(matches!(
            Family::poisson().log_likelihood(1.0, f64::NAN),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Family::new(FamilyKind::Poisson, Some(Link::Logit), None),
            Err(Error::Config(_))
        ));
        assert!(Family::poisson().log_likelihood(1.5, 0.0).is_err());
    }

    #[test]
    fn total_log_likelihood_small_cases() {
        let mut s = spec();
        s.random.clear();
        let mut state = one_block_state(1, 1, 1);
        state.blocks.clear();
        let empty = Dataset::new(vec![], vec![], 1, vec![], None).unwrap();
        assert_eq!(total_log_likelihood(&s, &state, &empty).unwrap(), 0.0);

        let zeros = Dataset::new(vec![0.0; 3], vec![1.0; 3], 1, vec![], None).unwrap();
        assert_abs_diff_eq!(total_log_likelihood(&s, &state, &zeros).unwrap(), -3.0, epsilon = 1e-15);

        let one = Dataset::new(vec![2.0], vec![1.0], 1, vec![], None).unwrap();
        state.beta[0] = 0.4;
        assert_eq!(
            total_log_likelihood(&s, &state, &one).unwrap(),
            Family::poisson().log_likelihood(2.0, 0.4).unwrap()
        );
    }

    #[test]
    fn gaussian_matches_closed_form() {
        let f = Family::gaussian(2.3).unwrap();
        for &(y, eta) in &[(0.1, -1.2), (3.0, 2.5), (-7.0, 0.0)] {
            let d: f64 = y - eta;
            let closed = -0.5 * (2.0 * std::f64::consts::PI * 2.3).ln() - d * d / (2.0 * 2.3);
            assert_abs_diff_eq!(f.log_likelihood(y, eta).unwrap(), closed, epsilon = 1e-12);
        }
    }

    #[test]
    fn spec_validation_collects_all_problems() {
        let mut s = spec();
        s.hyper.h = -1.0;
        s.fixed = vec!["a".into(), "a".into()];
        match s.validate() {
            Err(Error::Validation(v)) => assert_eq!(v.0.len(), 2, "{v:?}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn predictor_is_linear_in_included_beta(
            b0 in -3.0..3.0f64, b1 in -3.0..3.0f64, x1 in -2.0..2.0f64, delta in -1.0..1.0f64,
            on in any::<bool>()
        ) {
            let data = Dataset::new(vec![1.0], vec![1.0, x1], 2, vec![], None).unwrap();
            let mut s = spec();
            s.random.clear();
            s.fixed = vec![INTERCEPT.into(), "x1".into()];
            let mut state = one_block_state(2, 1, 1);
            state.blocks.clear();
            state.beta = vec![b0, b1];
            state.fixed_included = vec![true, on];
            let e0 = linear_predictor(&s, &state, &data, 0).unwrap();
            state.beta[1] += delta;
            let e1 = linear_predictor(&s, &state, &data, 0).unwrap();
            let expected = if on { delta * x1 } else { 0.0 };
            prop_assert!((e1 - e0 - expected).abs() < 1e-12);
        }

        #[test]
        fn poisson_mle_at_sample_mean(ys in proptest::collection::vec(0u32..20, 1..30), c in 0.05..25.0f64) {
            let f = Family::poisson();
            let mean = ys.iter().map(|&y| y as f64).sum::<f64>() / ys.len() as f64;
            prop_assume!(mean > 0.0);
            let ll = |mu: f64| ys.iter().map(|&y| f.log_likelihood(y as f64, mu.ln()).unwrap()).sum::<f64>();
            prop_assert!(ll(mean) >= ll(c) - 1e-9);
        }

        #[test]
        fn group_terms_update_total(
            xi in proptest::collection::vec(-2.0..2.0f64, 3),
            new_xi in -2.0..2.0f64,
            which in 0usize..3,
        ) {
            let data = intercept_data(vec![0.0, 1.0, 4.0, 2.0, 0.0, 3.0], vec![0, 0, 1, 1, 2, 2]);
            let s = spec();
            let mut state = one_block_state(1, 1, 3);
            state.beta[0] = 0.7;
            state.blocks[0].lambda[0] = 0.5;
            state.blocks[0].xi = xi;
            let total = total_log_likelihood(&s, &state, &data).unwrap();
            let before = group_log_likelihood(&s, &state, &data, 0, which).unwrap();
            state.blocks[0].xi[which] = new_xi;
            let after = group_log_likelihood(&s, &state, &data, 0, which).unwrap();
            let full = total_log_likelihood(&s, &state, &data).unwrap();
            prop_assert!((total - before + after - full).abs() < 1e-9);
        }
    }
}
