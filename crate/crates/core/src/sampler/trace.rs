use serde::{Deserialize, Serialize};

use crate::model::{BlockState, FamilyKind, ModelSpec, ParameterState, SelectionMode};
use crate::reparam::{self, EffectiveFactors};

use super::SamplerConfig;

/// Recorded projection of one random-effect block. All values effective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDraw {
    pub lambda: Vec<f64>,
    pub included: Vec<bool>,
    /// Packed subdiagonal of the effective Gamma.
    pub gamma: Vec<f64>,
    /// `n_groups x q`, row-major.
    pub xi: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl BlockDraw {
    pub fn q(&self) -> usize {
        self.lambda.len()
    }

    pub fn effective(&self) -> EffectiveFactors {
        reparam::project_constraints(
            &reparam::CholeskyFactors {
                lambda: self.lambda.clone(),
                gamma: self.gamma.clone(),
            },
            &self.included,
        )
    }

    pub fn omega(&self) -> Vec<f64> {
        reparam::assemble_covariance(&self.effective())
    }
}

/// One recorded post-burn-in state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub log_posterior: f64,
    /// Effective fixed effects `J_p beta_p`.
    pub beta: Vec<f64>,
    pub fixed_included: Vec<bool>,
    pub blocks: Vec<BlockDraw>,
    pub dispersion: Option<f64>,
}

impl Draw {
    pub(crate) fn from_state(
        state: &ParameterState,
        mode: SelectionMode,
        iteration: usize,
        log_likelihood: f64,
        log_posterior: f64,
    ) -> Self {
        Draw {
            iteration,
            log_likelihood,
            log_posterior,
            beta: state.effective_beta(),
            fixed_included: state.fixed_included.clone(),
            blocks: state
                .blocks
                .iter()
                .map(|b| {
                    let eff = b.effective(mode);
                    let q = b.q();
                    let mut gamma = Vec::with_capacity(b.gamma.len());
                    for u in 1..q {
                        for v in 0..u {
                            gamma.push(eff.gamma_at(u, v));
                        }
                    }
                    BlockDraw {
                        lambda: eff.lambda,
                        included: b.included.clone(),
                        gamma,
                        xi: b.xi.clone(),
                        kappa: b.kappa.clone(),
                    }
                })
                .collect(),
            dispersion: state.dispersion,
        }
    }

    /// A state whose effective values reproduce this draw. Hyper-latents not
    /// recorded in the draw are set to 1.
    pub fn to_state(&self) -> ParameterState {
        let l = self.beta.len();
        ParameterState {
            beta: self.beta.clone(),
            fixed_included: self.fixed_included.clone(),
            theta: vec![1.0; l],
            phi: vec![1.0; l],
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let q = b.q();
                    BlockState {
                        lambda: b.lambda.clone(),
                        included: b.included.clone(),
                        gamma: b.gamma.clone(),
                        xi: b.xi.clone(),
                        kappa: b.kappa.clone(),
                        m: vec![1.0; q],
                        tau2: vec![1.0; q],
                    }
                })
                .collect(),
            dispersion: self.dispersion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    /// Grouping column.
    pub name: String,
    pub columns: Vec<String>,
    pub group_labels: Vec<String>,
}

/// Names and shapes needed to interpret draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLayout {
    pub family: FamilyKind,
    pub mode: SelectionMode,
    pub fixed_names: Vec<String>,
    pub blocks: Vec<BlockLayout>,
}

impl TraceLayout {
    pub fn new(spec: &ModelSpec, data: &crate::model::Dataset) -> Self {
        let fixed_names = if spec.fixed.len() == data.n_fixed() {
            spec.fixed.clone()
        } else {
            (1..=data.n_fixed()).map(|p| format!("x{p}")).collect()
        };
        let blocks = data
            .blocks()
            .iter()
            .enumerate()
            .map(|(b, design)| {
                let (name, columns) = match spec.random.get(b) {
                    Some(rb) if rb.columns.len() == design.q() => (rb.group.clone(), rb.columns.clone()),
                    _ => (
                        format!("block{}", b + 1),
                        (1..=design.q()).map(|k| format!("z{k}")).collect(),
                    ),
                };
                BlockLayout {
                    name,
                    columns,
                    group_labels: design.labels().to_vec(),
                }
            })
            .collect();
        TraceLayout {
            family: spec.family,
            mode: spec.mode,
            fixed_names,
            blocks,
        }
    }
}

/// Per-chain bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    /// Slice updates stopped by the expansion limit.
    pub step_out_cap_hits: u64,
    /// Full recomputations that found cached predictors off by more than 1e-9.
    pub drift_events: u64,
    pub max_drift: f64,
    /// Prior draws rejected at initialization for a non-finite likelihood.
    pub init_rejections: u32,
    pub final_widths: super::SliceWidths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub chain: usize,
    pub seed: u64,
    pub draws: Vec<Draw>,
    pub stats: ChainStats,
}

/// All recorded draws of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub layout: TraceLayout,
    pub config: SamplerConfig,
    pub chains: Vec<ChainTrace>,
}

impl Trace {
    pub fn draws(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-chain series of a scalar summary.
    pub fn series(&self, selector: impl Fn(&Draw) -> f64) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(&selector).collect())
            .collect()
    }
}
