//! Metropolis-within-Gibbs sampler: configuration, chain driver and output.

pub mod diagnostics;
mod gibbs;
pub mod slice;
pub mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, ParameterState};

pub use gibbs::{check_constraints, gibbs_scan, initial_state, update_indicator, IndicatorDraw, IndicatorTarget};
pub use trace::{BlockDraw, BlockLayout, ChainStats, ChainTrace, Draw, Trace, TraceLayout};

/// Slice widths per parameter family. Log-scale widths apply on the log axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceWidths {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub xi: f64,
    pub log_scale: f64,
    pub log_dispersion: f64,
}

impl Default for SliceWidths {
    fn default() -> Self {
        SliceWidths {
            beta: 1.0,
            lambda: 1.0,
            gamma: 1.0,
            xi: 1.0,
            log_scale: 1.0,
            log_dispersion: 1.0,
        }
    }
}

impl SliceWidths {
    fn values(&self) -> [f64; 6] {
        [
            self.beta,
            self.lambda,
            self.gamma,
            self.xi,
            self.log_scale,
            self.log_dispersion,
        ]
    }
}

/// Parameters held fixed at their initial values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Freeze {
    /// Fixed-effect scale latents `theta` and `phi`.
    pub shrinkage: bool,
    /// Overdispersion or residual variance.
    pub dispersion: bool,
}

fn d_chains() -> usize {
    3
}
fn d_adapt() -> usize {
    1000
}
fn d_burn() -> usize {
    1000
}
fn d_kept() -> usize {
    3000
}
fn d_one() -> usize {
    1
}
fn d_seed() -> u64 {
    1
}
fn d_steps() -> u32 {
    32
}
fn d_true() -> bool {
    true
}
fn d_rhat() -> f64 {
    1.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "d_chains")]
    pub chains: usize,
    /// Scans used to tune slice widths, then discarded.
    #[serde(default = "d_adapt")]
    pub adapt: usize,
    #[serde(default = "d_burn")]
    pub burn_in: usize,
    /// Recorded draws per chain.
    #[serde(default = "d_kept")]
    pub kept: usize,
    #[serde(default = "d_one")]
    pub thin: usize,
    /// Chain `c` uses `seed + c`.
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub widths: SliceWidths,
    #[serde(default = "d_steps")]
    pub max_step_outs: u32,
    /// Scans between full recomputations of the cached linear predictor.
    #[serde(default = "d_one")]
    pub recompute_period: usize,
    #[serde(default = "d_true")]
    pub check_invariants: bool,
    #[serde(default)]
    pub freeze: Freeze,
    #[serde(default = "d_rhat")]
    pub rhat_threshold: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: d_chains(),
            adapt: d_adapt(),
            burn_in: d_burn(),
            kept: d_kept(),
            thin: d_one(),
            seed: d_seed(),
            widths: SliceWidths::default(),
            max_step_outs: d_steps(),
            recompute_period: d_one(),
            check_invariants: true,
            freeze: Freeze::default(),
            rhat_threshold: d_rhat(),
        }
    }
}

impl SamplerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.chains == 0 {
            p.push("sampler.chains must be at least 1".into());
        }
        if self.thin == 0 {
            p.push("sampler.thin must be at least 1".into());
        }
        if self.recompute_period == 0 {
            p.push("sampler.recompute_period must be at least 1".into());
        }
        if self.widths.values().iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            p.push("slice widths must be positive and finite".into());
        }
        if !(self.rhat_threshold > 1.0) {
            p.push("sampler.rhat_threshold must exceed 1".into());
        }
        p
    }

    /// Total scans per chain.
    pub fn total_scans(&self) -> usize {
        self.adapt + self.burn_in + self.kept * self.thin
    }
}

/// Starting point of each chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Initialization {
    /// Independent prior draw per chain, dispersion set to 1.
    Prior,
    /// The same state for every chain.
    State(ParameterState),
}

/// Runs `config.chains` chains in parallel from prior draws.
pub fn run_chains(spec: &ModelSpec, data: &Dataset, config: &SamplerConfig) -> Result<Trace> {
    run_chains_with(spec, data, config, &Initialization::Prior)
}

pub fn run_chains_with(
    spec: &ModelSpec,
    data: &Dataset,
    config: &SamplerConfig,
    init: &Initialization,
) -> Result<Trace> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let model = gibbs::Model::new(spec, data, config)?;
    let chains: Vec<ChainTrace> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&model, c, init))
        .collect::<Result<_>>()?;
    Ok(Trace {
        layout: TraceLayout::new(spec, data),
        config: config.clone(),
        chains,
    })
}

const ADAPT_WINDOW: usize = 25;

fn run_chain(model: &gibbs::Model<'_>, index: usize, init: &Initialization) -> Result<ChainTrace> {
    let config = model.config;
    let seed = config.seed.wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (state, rejections) = match init {
        Initialization::Prior => model.initial_state(&mut rng)?,
        Initialization::State(s) => (s.clone(), 0),
    };
    let mut chain = gibbs::Chain::new(model, state)?;
    chain.stats.init_rejections = rejections;
    let mut draws = Vec::with_capacity(config.kept);
    let record_from = config.adapt + config.burn_in;
    for it in 0..config.total_scans() {
        chain.adapting = it < config.adapt;
        chain.scan(&mut rng)?;
        if it < config.adapt {
            if (it + 1) % ADAPT_WINDOW == 0 || it + 1 == config.adapt {
                chain.adapt_widths();
            }
        } else if it >= record_from && (it - record_from + 1).is_multiple_of(config.thin) {
            if config.check_invariants {
                check_constraints(&chain.state, model.spec.mode)?;
            }
            draws.push(chain.record(it + 1)?);
        }
    }
    chain.stats.final_widths = chain.widths;
    Ok(ChainTrace {
        chain: index,
        seed,
        draws,
        stats: chain.stats,
    })
}
