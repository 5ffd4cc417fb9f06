//! Model-selection summaries: inclusion patterns, their posterior
//! frequencies, marginal inclusion probabilities, RMSE and grid tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterState;
use crate::sampler::{Draw, Trace, TraceLayout};

/// An inclusion pattern: fixed-effect indicators followed by one indicator
/// vector per random block, in spec order.
///
/// Labels order lexicographically with excluded before included, fixed
/// effects first; this order breaks frequency ties.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelLabel {
    pub fixed: Vec<bool>,
    pub random: Vec<Vec<bool>>,
}

fn bits(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl ModelLabel {
    /// Compact bit form, e.g. `111100|1010`.
    pub fn code(&self) -> String {
        let mut s = bits(&self.fixed);
        for r in &self.random {
            s.push('|');
            s.push_str(&bits(r));
        }
        s
    }

    /// Parses [`ModelLabel::code`] output.
    pub fn from_code(code: &str) -> Result<Self> {
        let parse = |part: &str| -> Result<Vec<bool>> {
            part.chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(Error::Parse {
                        location: "model label".into(),
                        message: format!("unexpected character '{c}' in '{code}'"),
                    }),
                })
                .collect()
        };
        let mut parts = code.split('|');
        let fixed = parse(parts.next().unwrap_or(""))?;
        let random = parts.map(parse).collect::<Result<_>>()?;
        Ok(ModelLabel { fixed, random })
    }

    /// Names of the included effects, e.g. `x1, x2 + (Intercept|g)`.
    pub fn describe(&self, layout: &TraceLayout) -> String {
        let pick = |names: &[String], on: &[bool]| -> Vec<String> {
            on.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| names.get(i).cloned().unwrap_or_else(|| format!("#{}", i + 1)))
                .collect()
        };
        let mut s = pick(&layout.fixed_names, &self.fixed).join(", ");
        for (b, on) in self.random.iter().enumerate() {
            let (cols, group) = match layout.blocks.get(b) {
                Some(bl) => (bl.columns.clone(), bl.name.clone()),
                None => (Vec::new(), format!("block{}", b + 1)),
            };
            let chosen = pick(&cols, on);
            let _ = write!(s, " + ({} | {group})", chosen.join(", "));
        }
        s
    }
}

pub fn label_of(state: &ParameterState) -> ModelLabel {
    ModelLabel {
        fixed: state.fixed_included.clone(),
        random: state.blocks.iter().map(|b| b.included.clone()).collect(),
    }
}

pub fn label_of_draw(draw: &Draw) -> ModelLabel {
    ModelLabel {
        fixed: draw.fixed_included.clone(),
        random: draw.blocks.iter().map(|b| b.included.clone()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFrequency {
    pub label: ModelLabel,
    pub count: usize,
    pub percent: f64,
}

/// Per-effect posterior inclusion frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionProbabilities {
    pub fixed: Vec<f64>,
    pub random: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub total: usize,
    /// Most frequent labels first, truncated to the requested length.
    pub models: Vec<ModelFrequency>,
    pub inclusion: InclusionProbabilities,
    pub modal: ModelLabel,
    pub rmse: Option<f64>,
}

fn nonempty(trace: &Trace) -> Result<()> {
    if trace.is_empty() {
        Err(Error::EmptyTrace)
    } else {
        Ok(())
    }
}

/// Counts labels, most frequent first, ties by label order.
pub fn label_counts<'a>(labels: impl IntoIterator<Item = &'a ModelLabel>) -> Vec<(ModelLabel, usize)> {
    let mut counts: HashMap<&ModelLabel, usize> = HashMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut v: Vec<(ModelLabel, usize)> = counts.into_iter().map(|(l, c)| (l.clone(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Frequency table of the `k` most frequent labels (`usize::MAX` for all).
pub fn top_models(trace: &Trace, k: usize) -> Result<SelectionReport> {
    nonempty(trace)?;
    let labels: Vec<ModelLabel> = trace.draws().map(label_of_draw).collect();
    let total = labels.len();
    let counts = label_counts(&labels);
    let modal = counts[0].0.clone();
    let models = counts
        .into_iter()
        .take(k)
        .map(|(label, count)| ModelFrequency {
            label,
            count,
            percent: 100.0 * count as f64 / total as f64,
        })
        .collect();
    Ok(SelectionReport {
        total,
        models,
        inclusion: inclusion_probabilities(trace)?,
        modal,
        rmse: None,
    })
}

pub fn inclusion_probabilities(trace: &Trace) -> Result<InclusionProbabilities> {
    nonempty(trace)?;
    let first = trace.draws().next().expect("nonempty");
    let mut fixed = vec![0usize; first.fixed_included.len()];
    let mut random: Vec<Vec<usize>> = first.blocks.iter().map(|b| vec![0; b.q()]).collect();
    let mut n = 0usize;
    for d in trace.draws() {
        n += 1;
        for (c, &j) in fixed.iter_mut().zip(&d.fixed_included) {
            *c += usize::from(j);
        }
        for (cb, b) in random.iter_mut().zip(&d.blocks) {
            for (c, &i) in cb.iter_mut().zip(&b.included) {
                *c += usize::from(i);
            }
        }
    }
    let f = |c: usize| c as f64 / n as f64;
    Ok(InclusionProbabilities {
        fixed: fixed.into_iter().map(f).collect(),
        random: random.into_iter().map(|b| b.into_iter().map(f).collect()).collect(),
    })
}

/// Posterior mean of the effective fixed effects.
pub fn posterior_mean_beta(trace: &Trace) -> Result<Vec<f64>> {
    nonempty(trace)?;
    let l = trace.draws().next().expect("nonempty").beta.len();
    let mut sum = vec![0.0; l];
    for d in trace.draws() {
        for (s, b) in sum.iter_mut().zip(&d.beta) {
            *s += b;
        }
    }
    let n = trace.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// `sqrt(mean_p (mean(J_p beta_p) - truth_p)^2)`.
pub fn fixed_effect_rmse(trace: &Trace, truth: &[f64]) -> Result<f64> {
    let mean = posterior_mean_beta(trace)?;
    if mean.len() != truth.len() {
        return Err(Error::Config(format!(
            "truth has {} coefficients, model has {}",
            truth.len(),
            mean.len()
        )));
    }
    let mse = mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / mean.len().max(1) as f64;
    Ok(mse.sqrt())
}

/// One cell of a hyperparameter grid for one simulation case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub case: u8,
    pub v: f64,
    pub h: f64,
    pub model_percent: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub v: f64,
    pub h: f64,
    pub case1: Option<(f64, f64)>,
    pub case2: Option<(f64, f64)>,
}

/// Grid summary in the layout `v=nu, h, case 1 percent, case 1 RMSE,
/// case 2 percent, case 2 RMSE`. Rows are ordered by `h`, then `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
    /// `(case, v, h)` combinations present for one case but not the other.
    pub missing: Vec<(u8, f64, f64)>,
}

pub fn grid_report(cells: &[GridCell]) -> Result<GridTable> {
    for c in cells {
        if c.case != 1 && c.case != 2 {
            return Err(Error::Config(format!("grid cell has case {}", c.case)));
        }
    }
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for c in cells {
        if !keys.iter().any(|&(v, h)| v == c.v && h == c.h) {
            keys.push((c.v, c.h));
        }
    }
    keys.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let cases: Vec<u8> = {
        let mut c: Vec<u8> = cells.iter().map(|c| c.case).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let find = |case: u8, v: f64, h: f64| {
        cells
            .iter()
            .find(|c| c.case == case && c.v == v && c.h == h)
            .map(|c| (c.model_percent, c.rmse))
    };
    let mut missing = Vec::new();
    let rows = keys
        .into_iter()
        .map(|(v, h)| {
            for &case in &cases {
                if find(case, v, h).is_none() {
                    missing.push((case, v, h));
                }
            }
            GridRow {
                v,
                h,
                case1: find(1, v, h),
                case2: find(2, v, h),
            }
        })
        .collect();
    Ok(GridTable { rows, missing })
}

fn opt_pair(p: Option<(f64, f64)>) -> (String, String) {
    match p {
        Some((pct, rmse)) => (format!("{pct:.1}"), format!("{rmse:.6}")),
        None => ("NA".into(), "NA".into()),
    }
}

impl GridTable {
    pub const HEADER: [&'static str; 6] = [
        "v_nu",
        "h",
        "case1_model_percent",
        "case1_rmse",
        "case2_model_percent",
        "case2_rmse",
    ];

    pub fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let (p1, r1) = opt_pair(r.case1);
                let (p2, r2) = opt_pair(r.case2);
                vec![r.v.to_string(), r.h.to_string(), p1, r1, p2, r2]
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        aligned_text(&Self::HEADER.map(String::from), &self.records())
    }
}

/// Table of modal-label percentages across replicates, one column per
/// fitted mode. The true model, when given, is the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTable {
    pub columns: Vec<String>,
    pub rows: Vec<(ModelLabel, Vec<f64>)>,
}

/// Builds a model table from the modal labels of each replicate per column.
///
/// The `top` most frequent labels of the first column are listed, with
/// `truth` forced to the first row.
pub fn model_table(columns: &[(String, Vec<ModelLabel>)], truth: Option<&ModelLabel>, top: usize) -> ModelTable {
    let mut order: Vec<ModelLabel> = Vec::new();
    if let Some(t) = truth {
        order.push(t.clone());
    }
    if let Some((_, first)) = columns.first() {
        for (l, _) in label_counts(first) {
            if order.len() >= top {
                break;
            }
            if !order.contains(&l) {
                order.push(l);
            }
        }
    }
    let rows = order
        .into_iter()
        .map(|label| {
            let pcts = columns
                .iter()
                .map(|(_, labels)| {
                    if labels.is_empty() {
                        0.0
                    } else {
                        100.0 * labels.iter().filter(|l| **l == label).count() as f64 / labels.len() as f64
                    }
                })
                .collect();
            (label, pcts)
        })
        .collect();
    ModelTable {
        columns: columns.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    }
}

impl ModelTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["model".to_string(), "effects".to_string()];
        h.extend(self.columns.iter().cloned());
        h
    }

    pub fn records(&self, layout: Option<&TraceLayout>) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(label, pcts)| {
                let mut r = vec![label.code(), layout.map(|l| label.describe(l)).unwrap_or_default()];
                r.extend(pcts.iter().map(|p| format!("{p:.1}")));
                r
            })
            .collect()
    }
}

impl SelectionReport {
    pub fn header() -> Vec<String> {
        ["rank", "model", "effects", "count", "percent"]
            .map(String::from)
            .to_vec()
    }

    pub fn records(&self, layout: &TraceLayout) -> Vec<Vec<String>> {
        self.models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                vec![
                    (i + 1).to_string(),
                    m.label.code(),
                    m.label.describe(layout),
                    m.count.to_string(),
                    format!("{:.2}", m.percent),
                ]
            })
            .collect()
    }

    /// `effect, kind, probability` rows.
    pub fn inclusion_records(&self, layout: &TraceLayout) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for (p, prob) in self.inclusion.fixed.iter().enumerate() {
            let name = layout
                .fixed_names
                .get(p)
                .cloned()
                .unwrap_or_else(|| format!("x{}", p + 1));
            out.push(vec![name, "fixed".into(), format!("{prob:.4}")]);
        }
        for (b, probs) in self.inclusion.random.iter().enumerate() {
            for (k, prob) in probs.iter().enumerate() {
                let name = layout
                    .blocks
                    .get(b)
                    .map(|bl| format!("{}|{}", bl.columns.get(k).cloned().unwrap_or_default(), bl.name))
                    .unwrap_or_else(|| format!("z{}|block{}", k + 1, b + 1));
                out.push(vec![name, "random".into(), format!("{prob:.4}")]);
            }
        }
        out
    }
}

/// Space-aligned plain-text table.
pub fn aligned_text(header: &[String], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(ncol) {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = width[i]))
            .collect();
        s.push_str(parts.join("  ").trim_end());
        s.push('\n');
    };
    line(&mut s, header);
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut s, &rule);
    for r in rows {
        line(&mut s, r);
    }
    s
}
