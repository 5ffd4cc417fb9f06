//! Convergence diagnostics over several chains.

use serde::Serialize;

use crate::error::{Error, Result};

use super::trace::{Draw, Trace};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn check_finite(chains: &[Vec<f64>]) -> Result<()> {
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("series contains non-finite values".into()));
    }
    Ok(())
}

/// Split potential scale reduction factor.
///
/// Each chain is cut into two halves (the middle draw is dropped for odd
/// lengths). Needs at least two halves of length two. Returns 1 when every
/// half is constant and equal, `inf` when halves are constant but differ.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_finite(chains)?;
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    if chains.is_empty() || half < 2 {
        return Err(Error::EmptyTrace);
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..n];
        halves.push(&c[..half]);
        halves.push(&c[n - half..]);
    }
    let m = halves.len() as f64;
    let len = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = halves.iter().map(|h| sample_var(h)).sum::<f64>() / m;
    let b = len * sample_var(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (len - 1.0) / len * w + b / len;
    Ok((var_plus / w).sqrt())
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
///
/// Chains are truncated to the shortest. The estimate is capped at
/// `N log10 N` for total draws `N`; a constant series returns `N`.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64> {
    check_finite(chains)?;
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let m = chains.len();
    if m == 0 || n < 4 || m * n < 8 {
        return Err(Error::EmptyTrace);
    }
    let total = (m * n) as f64;
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let mu = mean(&c[..n]);
            c[..n].iter().map(|v| v - mu).collect()
        })
        .collect();
    let acov = |t: usize| -> f64 {
        centered
            .iter()
            .map(|c| (0..n - t).map(|i| c[i] * c[i + t]).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let w = acov(0) * nf / (nf - 1.0);
    let between = if m > 1 {
        let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
        sample_var(&means)
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + between;
    if var_plus <= 0.0 {
        return Ok(total);
    }
    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;

    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let p = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if p <= 0.0 {
            break;
        }
        let p = p.min(prev);
        sum_pairs += p;
        prev = p;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10());
    Ok((total / tau).min(total * total.log10()))
}

pub fn gelman_rubin(trace: &Trace, selector: impl Fn(&Draw) -> f64) -> Result<f64> {
    split_rhat(&trace.series(selector))
}

pub fn effective_sample_size(trace: &Trace, selector: impl Fn(&Draw) -> f64) -> Result<f64> {
    ess(&trace.series(selector))
}

/// Convergence statistics of one monitored scalar. `None` where the chains
/// are too short.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Monitor {
    pub name: String,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// R-hat and ESS for the log-likelihood, every effective coefficient and
/// every effective random-effect scale.
pub fn monitors(trace: &Trace) -> Vec<Monitor> {
    let mut named: Vec<(String, Box<dyn Fn(&Draw) -> f64>)> =
        vec![("log_likelihood".into(), Box::new(|d: &Draw| d.log_likelihood))];
    for (p, name) in trace.layout.fixed_names.iter().enumerate() {
        named.push((format!("beta[{name}]"), Box::new(move |d: &Draw| d.beta[p])));
    }
    for (b, block) in trace.layout.blocks.iter().enumerate() {
        for (k, col) in block.columns.iter().enumerate() {
            named.push((
                format!("lambda[{}:{col}]", block.name),
                Box::new(move |d: &Draw| d.blocks[b].lambda[k]),
            ));
        }
    }
    named
        .into_iter()
        .map(|(name, f)| {
            let series = trace.series(f);
            Monitor {
                name,
                rhat: split_rhat(&series).ok(),
                ess: ess(&series).ok(),
            }
        })
        .collect()
}

/// Monitors whose R-hat exceeds `threshold` or is undefined.
pub fn unconverged(monitors: &[Monitor], threshold: f64) -> Vec<&Monitor> {
    monitors
        .iter()
        .filter(|m| !m.rhat.is_some_and(|r| r <= threshold))
        .collect()
}

pub const MONITOR_HEADER: [&str; 3] = ["parameter", "rhat", "ess"];

pub fn monitor_records(monitors: &[Monitor]) -> Vec<Vec<String>> {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    monitors
        .iter()
        .map(|m| vec![m.name.clone(), fmt(m.rhat), fmt(m.ess)])
        .collect()
}
