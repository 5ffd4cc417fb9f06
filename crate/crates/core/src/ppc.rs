//! Posterior predictive checks: replicated responses, rootogram bins and
//! mean/sd scatter data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, EffectiveState, Family, ModelSpec, ParameterState};
use crate::priors::draw;
use crate::sampler::{Draw, Trace};

/// How random effects enter a replicate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replication {
    /// Reuse the fitted latent effects of the draw.
    #[default]
    Conditional,
    /// Draw fresh latent effects for every group from their prior given the
    /// draw's scales.
    Marginal,
}

/// Simulates `n_rep` response vectors at the observed design, each from a
/// posterior draw picked uniformly at random.
pub fn replicate_data<R: Rng + ?Sized>(
    trace: &Trace,
    spec: &ModelSpec,
    data: &Dataset,
    n_rep: usize,
    how: Replication,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if n_rep == 0 {
        return Ok(Vec::new());
    }
    let draws: Vec<&Draw> = trace.draws().collect();
    if draws.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let jobs: Vec<(usize, u64)> = (0..n_rep)
        .map(|_| (rng.random_range(0..draws.len()), rng.random()))
        .collect();
    jobs.into_par_iter()
        .map(|(pick, seed)| {
            let mut child = ChaCha8Rng::seed_from_u64(seed);
            replicate_one(draws[pick], spec, data, how, &mut child)
        })
        .collect()
}

fn replicate_one<R: Rng + ?Sized>(
    draw: &Draw,
    spec: &ModelSpec,
    data: &Dataset,
    how: Replication,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut state: ParameterState = draw.to_state();
    if how == Replication::Marginal {
        let scale = spec.priors.xi_scale;
        for block in &mut state.blocks {
            let q = block.q();
            for (i, xi) in block.xi.iter_mut().enumerate() {
                *xi = draw::normal(rng, 0.0, scale.variance(block.kappa[i % q]));
            }
        }
    }
    let family = Family::new(spec.family, Some(spec.link()), state.dispersion)?;
    let eff = EffectiveState::new(&state, spec.mode);
    (0..data.n_obs())
        .map(|i| family.sample(eff.eta(&state, data, i), rng))
        .collect()
}

/// One rootogram bin. `count` is `None` for the tail bin holding every
/// value above `max_count`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootogramBin {
    pub count: Option<u64>,
    pub observed: f64,
    pub expected: f64,
    pub sqrt_observed: f64,
    pub sqrt_expected: f64,
}

fn count_value(y: f64) -> Result<u64> {
    if y >= 0.0 && y.fract() == 0.0 && y.is_finite() {
        Ok(y as u64)
    } else {
        Err(Error::Domain(format!("rootogram needs counts, got {y}")))
    }
}

fn frequencies(ys: &[f64], max_count: u64) -> Result<Vec<f64>> {
    let mut f = vec![0.0; max_count as usize + 2];
    for &y in ys {
        let c = count_value(y)?;
        let bin = if c > max_count {
            max_count as usize + 1
        } else {
            c as usize
        };
        f[bin] += 1.0;
    }
    Ok(f)
}

/// Observed and mean replicated frequency of each count `0..=max_count`,
/// then a tail bin. The tail bin is dropped when both sides are empty.
pub fn rootogram(observed: &[f64], replicates: &[Vec<f64>], max_count: u64) -> Result<Vec<RootogramBin>> {
    let obs = frequencies(observed, max_count)?;
    let mut expected = vec![0.0; obs.len()];
    for rep in replicates {
        for (e, f) in expected.iter_mut().zip(frequencies(rep, max_count)?) {
            *e += f;
        }
    }
    if !replicates.is_empty() {
        for e in &mut expected {
            *e /= replicates.len() as f64;
        }
    }
    let tail = obs.len() - 1;
    Ok(obs
        .iter()
        .zip(&expected)
        .enumerate()
        .filter(|&(i, (&o, &e))| i < tail || o > 0.0 || e > 0.0)
        .map(|(i, (&o, &e))| RootogramBin {
            count: (i < tail).then_some(i as u64),
            observed: o,
            expected: e,
            sqrt_observed: o.sqrt(),
            sqrt_expected: e.sqrt(),
        })
        .collect())
}

/// Largest count in the data, the natural `max_count` for [`rootogram`].
pub fn max_count(ys: &[f64]) -> Result<u64> {
    ys.iter().try_fold(0, |m, &y| Ok(m.max(count_value(y)?)))
}

/// Sample mean and standard deviation with denominator `n - 1`.
pub fn mean_sd(ys: &[f64]) -> Result<(f64, f64)> {
    if ys.len() < 2 {
        return Err(Error::Domain(format!(
            "standard deviation needs at least 2 values, got {}",
            ys.len()
        )));
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let ss: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// `(mean, sd)` of every replicate.
pub fn mean_sd_scatter(replicates: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    replicates.iter().map(|r| mean_sd(r)).collect()
}

/// Data behind the rootogram and scatter plots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpcSummary {
    /// Empty for non-count families.
    pub rootogram: Vec<RootogramBin>,
    pub replicates: Vec<(f64, f64)>,
    pub observed: (f64, f64),
}

impl PpcSummary {
    pub fn new(observed: &[f64], replicates: &[Vec<f64>], counts: bool) -> Result<Self> {
        let rootogram = if counts {
            let top = replicates
                .iter()
                .try_fold(max_count(observed)?, |m, r| Ok::<_, Error>(m.max(max_count(r)?)))?;
            rootogram(observed, replicates, top)?
        } else {
            Vec::new()
        };
        Ok(PpcSummary {
            rootogram,
            replicates: mean_sd_scatter(replicates)?,
            observed: mean_sd(observed)?,
        })
    }

    /// Whether the observed pair lies in the central `level` mass of the
    /// replicate cloud, ranked by Mahalanobis distance from the cloud centre.
    pub fn observed_inside(&self, level: f64) -> Result<bool> {
        let d = mahalanobis_depths(&self.replicates, self.observed)?;
        let mut cloud = d.cloud;
        cloud.sort_by(f64::total_cmp);
        let k = ((level * cloud.len() as f64).ceil() as usize).clamp(1, cloud.len());
        Ok(d.observed <= cloud[k - 1])
    }

    pub const SCATTER_HEADER: [&'static str; 3] = ["replicate", "mean", "sd"];
    pub const ROOTOGRAM_HEADER: [&'static str; 5] = ["count", "observed", "expected", "sqrt_observed", "sqrt_expected"];

    /// Scatter rows; the observed pair comes first with replicate `observed`.
    pub fn scatter_records(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec![
            "observed".to_string(),
            self.observed.0.to_string(),
            self.observed.1.to_string(),
        ]];
        rows.extend(
            self.replicates
                .iter()
                .enumerate()
                .map(|(i, (m, s))| vec![i.to_string(), m.to_string(), s.to_string()]),
        );
        rows
    }

    /// Rootogram rows; the tail bin has count `tail`.
    pub fn rootogram_records(&self) -> Vec<Vec<String>> {
        self.rootogram
            .iter()
            .map(|b| {
                vec![
                    b.count.map_or_else(|| "tail".to_string(), |c| c.to_string()),
                    b.observed.to_string(),
                    b.expected.to_string(),
                    b.sqrt_observed.to_string(),
                    b.sqrt_expected.to_string(),
                ]
            })
            .collect()
    }
}

struct Depths {
    cloud: Vec<f64>,
    observed: f64,
}

fn mahalanobis_depths(cloud: &[(f64, f64)], point: (f64, f64)) -> Result<Depths> {
    if cloud.len() < 3 {
        return Err(Error::Domain("need at least 3 replicates for a cloud".into()));
    }
    let n = cloud.len() as f64;
    let (mx, my) = cloud.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in cloud {
        sxx += (x - mx) * (x - mx) / (n - 1.0);
        syy += (y - my) * (y - my) / (n - 1.0);
        sxy += (x - mx) * (y - my) / (n - 1.0);
    }
    let det = sxx * syy - sxy * sxy;
    // a degenerate cloud falls back to a scaled Euclidean distance
    let dist = |(x, y): (f64, f64)| {
        let (dx, dy) = (x - mx, y - my);
        if det > 1e-12 * (sxx * syy).max(f64::MIN_POSITIVE) {
            (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det
        } else {
            dx * dx / sxx.max(f64::MIN_POSITIVE) + dy * dy / syy.max(f64::MIN_POSITIVE)
        }
    };
    Ok(Depths {
        cloud: cloud.iter().map(|&p| dist(p)).collect(),
        observed: dist(point),
    })
}
