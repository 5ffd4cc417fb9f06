//! Synthetic Poisson mixed-model designs and replication studies.
//!
//! Every replicate draws its coefficients, covariates, random effects and
//! responses from separate ChaCha8 streams seeded by a splitmix64 mix of the
//! base seed, the replicate index and a stream tag. The two cases share all
//! streams, so their datasets differ only through the small coefficients'
//! effect on the response. Responses use one child stream per observation so
//! that a change in one mean leaves every other draw intact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Dataset, FamilyKind, Hyperparameters, ModelSpec, RandomBlockSpec, RandomDesign, SelectionMode, INTERCEPT,
};
use crate::reparam;
use crate::sampler::{run_chains, SamplerConfig};
use crate::select::{self, GridCell, ModelLabel, ModelTable};

/// Upper guard on the linear predictor before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;

const STREAM_BETA: u64 = 1;
const STREAM_X: u64 = 2;
const STREAM_RHO: u64 = 3;
const STREAM_Y: u64 = 4;

/// splitmix64 finalizer applied to a combination of two words.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, replicate: usize, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, replicate as u64), tag))
}

/// Sparse (inactive coefficients exactly zero) or small-signal case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    Sparse,
    SmallSignal,
}

impl Case {
    pub fn number(self) -> u8 {
        match self {
            Case::Sparse => 1,
            Case::SmallSignal => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub n_subjects: usize,
    pub n_per_subject: usize,
    /// Number of fixed effects, intercept included.
    pub n_fixed: usize,
    /// Random effects sit on the first `q` fixed-effect columns.
    pub q: usize,
    pub intercept: f64,
    /// Coefficients `2..=active_fixed` are drawn from `Unif(-bound, bound)`.
    pub active_fixed: usize,
    pub uniform_bound: f64,
    pub case: Case,
    /// Value of the inactive coefficients in the small-signal case.
    pub small_value: f64,
    /// `q x q` row-major random-effect covariance.
    pub omega: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

/// Nonzero block of the reference covariance on effects 1, 3 and 6.
pub const REFERENCE_BLOCK: [[f64; 3]; 3] = [[0.08, 0.04, 0.02], [0.04, 0.15, 0.09], [0.02, 0.09, 0.06]];

fn embed(q: usize, idx: &[usize], block: &[Vec<f64>]) -> Vec<f64> {
    let mut omega = vec![0.0; q * q];
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            omega[i * q + j] = block[a][b];
        }
    }
    omega
}

impl SimDesign {
    /// Ten fixed and ten random effects, active fixed 1..6 and random
    /// {1, 3, 6}, 60 subjects with 10 observations each.
    pub fn reference(case: Case) -> Self {
        let block: Vec<Vec<f64>> = REFERENCE_BLOCK.iter().map(|r| r.to_vec()).collect();
        SimDesign {
            n_subjects: 60,
            n_per_subject: 10,
            n_fixed: 10,
            q: 10,
            intercept: 2.0,
            active_fixed: 6,
            uniform_bound: 0.4,
            case,
            small_value: 0.01,
            omega: embed(10, &[0, 2, 5], &block),
            replicates: 100,
            seed: 2024,
        }
    }

    /// Six fixed and six random effects, active fixed 1..4 and random
    /// {1, 3} with the covariance of effects 1 and 3 of the reference block.
    pub fn scaled(case: Case) -> Self {
        let block = vec![
            vec![REFERENCE_BLOCK[0][0], REFERENCE_BLOCK[0][1]],
            vec![REFERENCE_BLOCK[1][0], REFERENCE_BLOCK[1][1]],
        ];
        SimDesign {
            n_subjects: 60,
            n_per_subject: 10,
            n_fixed: 6,
            q: 6,
            intercept: 2.0,
            active_fixed: 4,
            uniform_bound: 0.4,
            case,
            small_value: 0.01,
            omega: embed(6, &[0, 2], &block),
            replicates: 20,
            seed: 2024,
        }
    }

    pub fn with_case(&self, case: Case) -> Self {
        SimDesign { case, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.n_subjects == 0 || self.n_per_subject == 0 {
            p.push("design needs at least one subject and one observation each".to_string());
        }
        if self.n_fixed == 0 || self.q == 0 || self.q > self.n_fixed {
            p.push(format!(
                "need 1 <= q <= n_fixed, got q = {}, n_fixed = {}",
                self.q, self.n_fixed
            ));
        }
        if self.active_fixed == 0 || self.active_fixed > self.n_fixed {
            p.push(format!("active_fixed must be in 1..={}", self.n_fixed));
        }
        if !(self.uniform_bound >= 0.0) {
            p.push("uniform_bound must be nonnegative".into());
        }
        if self.omega.len() != self.q * self.q {
            p.push(format!("omega must have {} entries", self.q * self.q));
        }
        if !p.is_empty() {
            return Err(Error::Config(p.join("; ")));
        }
        reparam::decompose_covariance(&self.omega, reparam::ZERO_TOL)?;
        Ok(())
    }

    pub fn fixed_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain((2..=self.n_fixed).map(|p| format!("x{p}")))
            .collect()
    }

    /// Spec for fitting this design: Poisson, log link, one subject block on
    /// the first `q` columns.
    pub fn model_spec(&self, mode: SelectionMode, hyper: Hyperparameters) -> ModelSpec {
        let names = self.fixed_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut spec = ModelSpec::new(
            FamilyKind::Poisson,
            "y",
            &refs,
            vec![RandomBlockSpec {
                group: "subject".into(),
                columns: names[..self.q].to_vec(),
            }],
        );
        spec.mode = mode;
        spec.hyper = hyper;
        spec
    }
}

/// Generating values of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub omega: Vec<f64>,
    /// Effects belonging to the true model (small-signal coefficients are
    /// not part of it).
    pub active_fixed: Vec<bool>,
    pub active_random: Vec<bool>,
    /// Linear predictors clamped at [`ETA_CLAMP`].
    pub clamped: usize,
}

impl Truth {
    pub fn label(&self) -> ModelLabel {
        ModelLabel {
            fixed: self.active_fixed.clone(),
            random: vec![self.active_random.clone()],
        }
    }
}

/// Coefficients of one replicate.
pub fn draw_beta(design: &SimDesign, replicate: usize) -> Vec<f64> {
    let mut rng = stream(design.seed, replicate, STREAM_BETA);
    (0..design.n_fixed)
        .map(|p| {
            if p == 0 {
                design.intercept
            } else if p < design.active_fixed {
                // one draw per active slot keeps the stream aligned across cases
                (2.0 * rng.random::<f64>() - 1.0) * design.uniform_bound
            } else {
                match design.case {
                    Case::Sparse => 0.0,
                    Case::SmallSignal => design.small_value,
                }
            }
        })
        .collect()
}

/// Random effects `rho_i ~ N(0, Omega)` for every subject, through the
/// modified Cholesky factors.
pub fn draw_random_effects(design: &SimDesign, replicate: usize) -> Result<Vec<Vec<f64>>> {
    let factors = reparam::decompose_covariance(&design.omega, reparam::ZERO_TOL)?;
    let included: Vec<bool> = factors.lambda.iter().map(|&l| l > 0.0).collect();
    let eff = reparam::project_constraints(&factors, &included);
    let mut rng = stream(design.seed, replicate, STREAM_RHO);
    Ok((0..design.n_subjects)
        .map(|_| {
            let xi: Vec<f64> = (0..design.q).map(|_| StandardNormal.sample(&mut rng)).collect();
            reparam::random_effect_vector(&eff, &xi)
        })
        .collect())
}

/// Dataset and truth of replicate `replicate`; deterministic in
/// `(design.seed, replicate)`.
pub fn simulate_dataset(design: &SimDesign, replicate: usize) -> Result<(Dataset, Truth)> {
    design.validate()?;
    let beta = draw_beta(design, replicate);
    let rho = draw_random_effects(design, replicate)?;
    let (l, q) = (design.n_fixed, design.q);
    let n = design.n_subjects * design.n_per_subject;
    let mut x_rng = stream(design.seed, replicate, STREAM_X);
    let y_seed = mix_seed(mix_seed(design.seed, replicate as u64), STREAM_Y);
    let mut x = Vec::with_capacity(n * l);
    let mut z = Vec::with_capacity(n * q);
    let mut group = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut clamped = 0;
    for s in 0..design.n_subjects {
        for _ in 0..design.n_per_subject {
            let i = group.len();
            let row: Vec<f64> = (0..l)
                .map(|p| if p == 0 { 1.0 } else { StandardNormal.sample(&mut x_rng) })
                .collect();
            let mut eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            eta += (0..q).map(|k| row[k] * rho[s][k]).sum::<f64>();
            if eta > ETA_CLAMP {
                eta = ETA_CLAMP;
                clamped += 1;
            }
            let mut y_rng = ChaCha8Rng::seed_from_u64(mix_seed(y_seed, i as u64));
            let count = Poisson::new(eta.exp())
                .map_err(|e| Error::Numeric(format!("poisson mean {}: {e}", eta.exp())))?
                .sample(&mut y_rng);
            y.push(count);
            z.extend_from_slice(&row[..q]);
            x.extend(row);
            group.push(s);
        }
    }
    let labels = (1..=design.n_subjects).map(|s| format!("s{s}")).collect();
    let block = RandomDesign::new(z, q, group, Some(labels))?;
    let data = Dataset::new(y, x, l, vec![block], None)?;
    let truth = Truth {
        active_fixed: (0..l).map(|p| p < design.active_fixed).collect(),
        active_random: (0..q).map(|k| design.omega[k * q + k] > 0.0).collect(),
        omega: design.omega.clone(),
        beta,
        clamped,
    };
    Ok((data, truth))
}

/// Outcome of fitting one replicate in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub mode: SelectionMode,
    pub dataset_fingerprint: u64,
    pub true_beta: Vec<f64>,
    pub modal: Option<ModelLabel>,
    pub correct: bool,
    pub random_correct: bool,
    pub rmse: Option<f64>,
    pub clamped: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: SelectionMode,
    pub fitted: usize,
    pub failed: usize,
    pub correct_percent: f64,
    pub random_correct_percent: f64,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub design: SimDesign,
    pub truth_label: Option<ModelLabel>,
    pub rows: Vec<ReplicateRow>,
}

impl ReplicationResult {
    pub fn modes(&self) -> Vec<SelectionMode> {
        let mut m: Vec<SelectionMode> = Vec::new();
        for r in &self.rows {
            if !m.contains(&r.mode) {
                m.push(r.mode);
            }
        }
        m
    }

    /// Aggregates over successful fits of `mode`; failures are counted but
    /// excluded from percentages.
    pub fn summary(&self, mode: SelectionMode) -> ModeSummary {
        let rows: Vec<&ReplicateRow> = self.rows.iter().filter(|r| r.mode == mode).collect();
        let ok: Vec<&&ReplicateRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let n = ok.len();
        let pct = |f: &dyn Fn(&ReplicateRow) -> bool| {
            if n == 0 {
                f64::NAN
            } else {
                100.0 * ok.iter().filter(|r| f(r)).count() as f64 / n as f64
            }
        };
        let mean_rmse = if n == 0 {
            f64::NAN
        } else {
            ok.iter().filter_map(|r| r.rmse).sum::<f64>() / n as f64
        };
        ModeSummary {
            mode,
            fitted: n,
            failed: rows.len() - n,
            correct_percent: pct(&|r| r.correct),
            random_correct_percent: pct(&|r| r.random_correct),
            mean_rmse,
        }
    }

    pub const ROW_HEADER: [&'static str; 8] = [
        "replicate",
        "mode",
        "modal",
        "correct",
        "random_correct",
        "rmse",
        "clamped",
        "error",
    ];

    /// One row per replicate and mode.
    pub fn row_records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.replicate.to_string(),
                    r.mode.name().to_string(),
                    r.modal.as_ref().map(ModelLabel::code).unwrap_or_default(),
                    u8::from(r.correct).to_string(),
                    u8::from(r.random_correct).to_string(),
                    r.rmse.map(|v| format!("{v:.6}")).unwrap_or_default(),
                    r.clamped.to_string(),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect()
    }

    pub const SUMMARY_HEADER: [&'static str; 6] = [
        "mode",
        "fitted",
        "failed",
        "correct_percent",
        "random_correct_percent",
        "mean_rmse",
    ];

    pub fn summary_records(&self) -> Vec<Vec<String>> {
        self.modes()
            .into_iter()
            .map(|m| {
                let s = self.summary(m);
                vec![
                    m.name().to_string(),
                    s.fitted.to_string(),
                    s.failed.to_string(),
                    format!("{:.1}", s.correct_percent),
                    format!("{:.1}", s.random_correct_percent),
                    format!("{:.6}", s.mean_rmse),
                ]
            })
            .collect()
    }

    /// Table of modal models across replicates, one column per mode.
    pub fn model_table(&self, top: usize) -> ModelTable {
        let columns: Vec<(String, Vec<ModelLabel>)> = self
            .modes()
            .into_iter()
            .map(|m| (m.name().to_string(), self.modal_labels(m)))
            .collect();
        select::model_table(&columns, self.truth_label.as_ref(), top)
    }

    /// Modal labels of the successful fits of `mode`, by replicate.
    pub fn modal_labels(&self, mode: SelectionMode) -> Vec<ModelLabel> {
        self.rows
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.modal.clone())
            .collect()
    }
}

fn fit_one(
    design: &SimDesign,
    replicate: usize,
    template: &ModelSpec,
    config: &SamplerConfig,
    modes: &[SelectionMode],
) -> Vec<ReplicateRow> {
    let simulated = simulate_dataset(design, replicate);
    modes
        .iter()
        .map(|&mode| {
            let (data, truth) = match &simulated {
                Ok(v) => v,
                Err(e) => {
                    return ReplicateRow {
                        replicate,
                        mode,
                        dataset_fingerprint: 0,
                        true_beta: Vec::new(),
                        modal: None,
                        correct: false,
                        random_correct: false,
                        rmse: None,
                        clamped: 0,
                        error: Some(e.to_string()),
                    }
                }
            };
            let mut spec = template.clone();
            spec.mode = mode;
            let mut cfg = config.clone();
            cfg.seed = mix_seed(config.seed, replicate as u64);
            let fit = run_chains(&spec, data, &cfg).and_then(|trace| {
                let report = select::top_models(&trace, 1)?;
                let rmse = select::fixed_effect_rmse(&trace, &truth.beta)?;
                Ok((report.modal, rmse))
            });
            let truth_label = truth.label();
            match fit {
                Ok((modal, rmse)) => ReplicateRow {
                    replicate,
                    mode,
                    dataset_fingerprint: data.fingerprint(),
                    true_beta: truth.beta.clone(),
                    correct: modal == truth_label,
                    random_correct: modal.random == truth_label.random,
                    modal: Some(modal),
                    rmse: Some(rmse),
                    clamped: truth.clamped,
                    error: None,
                },
                Err(e) => {
                    log::warn!("replicate {replicate} ({}) failed: {e}", mode.name());
                    ReplicateRow {
                        replicate,
                        mode,
                        dataset_fingerprint: data.fingerprint(),
                        true_beta: truth.beta.clone(),
                        modal: None,
                        correct: false,
                        random_correct: false,
                        rmse: None,
                        clamped: truth.clamped,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

/// Simulates `design.replicates` datasets and fits each in every mode.
///
/// The template supplies hyperparameters and priors; its family, columns and
/// mode are taken from the design and `modes`.
pub fn run_replication(
    design: &SimDesign,
    template: &ModelSpec,
    config: &SamplerConfig,
    modes: &[SelectionMode],
) -> Result<ReplicationResult> {
    design.validate()?;
    let priors = template.priors;
    let mut template = design.model_spec(template.mode, template.hyper);
    template.priors = priors;
    template.sampler = config.clone();
    let rows: Vec<ReplicateRow> = (0..design.replicates)
        .into_par_iter()
        .flat_map_iter(|r| fit_one(design, r, &template, config, modes))
        .collect();
    let truth_label = if design.replicates > 0 {
        Some(ModelLabel {
            fixed: (0..design.n_fixed).map(|p| p < design.active_fixed).collect(),
            random: vec![(0..design.q).map(|k| design.omega[k * design.q + k] > 0.0).collect()],
        })
    } else {
        None
    };
    Ok(ReplicationResult {
        design: design.clone(),
        truth_label,
        rows,
    })
}

/// One `(h, v = nu)` combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub h: f64,
    pub v: f64,
}

/// The 3 x 3 grid of the reference study: `v = nu` in {0.01, 1, 5},
/// `h` in {0.1, 1, 10}.
pub fn reference_grid() -> Vec<GridPoint> {
    let mut g = Vec::new();
    for &h in &[0.1, 1.0, 10.0] {
        for &v in &[0.01, 1.0, 5.0] {
            g.push(GridPoint { h, v });
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub point: GridPoint,
    pub case: Case,
    pub result: ReplicationResult,
}

/// Runs every design at every grid point in `mode`. Cells share the
/// design seeds, so each replicate sees the same dataset in every cell.
pub fn run_grid(
    designs: &[SimDesign],
    grid: &[GridPoint],
    template: &ModelSpec,
    config: &SamplerConfig,
    mode: SelectionMode,
) -> Result<Vec<GridRun>> {
    let mut out = Vec::with_capacity(designs.len() * grid.len());
    for design in designs {
        for &point in grid {
            let mut spec = template.clone();
            spec.hyper = spec.hyper.with_grid_point(point.h, point.v);
            spec.mode = mode;
            let result = run_replication(design, &spec, config, &[mode])?;
            out.push(GridRun {
                point,
                case: design.case,
                result,
            });
        }
    }
    Ok(out)
}

/// Grid runs as report cells.
pub fn grid_cells(runs: &[GridRun]) -> Vec<GridCell> {
    runs.iter()
        .map(|r| {
            let s = r
                .result
                .summary(r.result.modes().first().copied().unwrap_or(SelectionMode::SsvsFull));
            GridCell {
                case: r.case.number(),
                v: r.point.v,
                h: r.point.h,
                model_percent: s.correct_percent,
                rmse: s.mean_rmse,
            }
        })
        .collect()
}
