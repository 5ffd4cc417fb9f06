//! Reading data and specs, and writing every output file atomically.
//!
//! Data files are CSV with a header row. Group columns may hold any text;
//! labels map to dense indices in order of first appearance. A trace is
//! stored as one CSV per chain plus a `trace_meta.json` sidecar.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_intercept, Dataset, ModelSpec, RandomDesign};
use crate::sampler::{BlockDraw, ChainStats, ChainTrace, Draw, SamplerConfig, Trace, TraceLayout};

/// Suffix marking a column computed as the square of its base column when
/// squares are requested and the file lacks it.
pub const SQUARE_SUFFIX: &str = "^2";

fn parse_error(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Reads the columns `spec` needs from a CSV file.
pub fn load_dataset(path: impl AsRef<Path>, spec: &ModelSpec, add_squares: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, &path.display().to_string(), spec, add_squares)
}

enum Source {
    Column(usize),
    Square(usize),
    Constant,
}

/// As [`load_dataset`] from any reader; `name` labels error locations.
pub fn read_dataset<R: Read>(reader: R, name: &str, spec: &ModelSpec, add_squares: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_error(name, "file is empty"));
    }
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let resolve = |col: &str, numeric: bool| -> Result<Source> {
        if numeric && is_intercept(col) {
            return Ok(Source::Constant);
        }
        if let Some(&i) = position.get(col) {
            return Ok(Source::Column(i));
        }
        if numeric && add_squares {
            if let Some(&i) = col.strip_suffix(SQUARE_SUFFIX).and_then(|base| position.get(base)) {
                return Ok(Source::Square(i));
            }
        }
        Err(parse_error(name, format!("missing column '{col}'")))
    };
    let response = resolve(&spec.response, false)?;
    let fixed: Vec<Source> = spec.fixed.iter().map(|c| resolve(c, true)).collect::<Result<_>>()?;
    let offset = spec.offset.as_deref().map(|c| resolve(c, false)).transpose()?;
    let blocks: Vec<(Source, Vec<Source>)> = spec
        .random
        .iter()
        .map(|b| {
            Ok((
                resolve(&b.group, false)?,
                b.columns.iter().map(|c| resolve(c, true)).collect::<Result<_>>()?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(parse_error(
                format!("{name} line {}", r + 2),
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        rows.push(rec);
    }
    if rows.is_empty() {
        return Err(parse_error(name, "no data rows"));
    }
    let number = |r: usize, src: &Source| -> Result<f64> {
        let i = match src {
            Source::Constant => return Ok(1.0),
            Source::Column(i) | Source::Square(i) => *i,
        };
        let cell = &rows[r][i];
        let v: f64 = cell.parse().map_err(|_| {
            parse_error(
                format!("{name} line {} column '{}'", r + 2, header[i]),
                format!("'{cell}' is not a number"),
            )
        })?;
        if !v.is_finite() {
            return Err(parse_error(
                format!("{name} line {} column '{}'", r + 2, header[i]),
                format!("'{cell}' is not finite"),
            ));
        }
        Ok(if matches!(src, Source::Square(_)) { v * v } else { v })
    };
    let n = rows.len();
    let y: Vec<f64> = (0..n).map(|r| number(r, &response)).collect::<Result<_>>()?;
    let mut x = Vec::with_capacity(n * fixed.len());
    for r in 0..n {
        for src in &fixed {
            x.push(number(r, src)?);
        }
    }
    let offset = offset
        .map(|src| (0..n).map(|r| number(r, &src)).collect::<Result<Vec<f64>>>())
        .transpose()?;
    let mut designs = Vec::with_capacity(blocks.len());
    for (group_src, cols) in &blocks {
        let Source::Column(gi) = group_src else {
            unreachable!("group columns are never numeric sources")
        };
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut group = Vec::with_capacity(n);
        for row in &rows {
            let label = &row[*gi];
            let next = index.len();
            let g = *index.entry(label).or_insert_with(|| {
                labels.push(label.to_string());
                next
            });
            group.push(g);
        }
        let mut z = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            for src in cols {
                z.push(number(r, src)?);
            }
        }
        designs.push(RandomDesign::new(z, cols.len(), group, Some(labels))?);
    }
    let data = Dataset::new(y, x, fixed.len(), designs, offset)?;
    data.validate_for(spec.family)?;
    Ok(data)
}

/// Parses and validates a JSON model spec, filling defaults.
pub fn parse_spec(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec_str(&text)
}

pub fn parse_spec_str(text: &str) -> Result<ModelSpec> {
    let spec: ModelSpec = serde_json::from_str(text)?;
    spec.validate()?;
    Ok(spec)
}

/// Reads any JSON document, such as a simulation design or grid.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `bytes` through a temporary file in the same directory, then
/// renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn csv_bytes<S: AsRef<str>>(header: &[S], records: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header.iter().map(|s| s.as_ref()))?;
    for r in records {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

pub fn write_csv<S: AsRef<str>>(path: impl AsRef<Path>, header: &[S], records: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, records)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Column names of the dataset file written for `data`: the response, the
/// non-intercept fixed columns, then one group column per block.
pub fn write_dataset(
    path: impl AsRef<Path>,
    data: &Dataset,
    response: &str,
    fixed: &[String],
    groups: &[String],
) -> Result<()> {
    let keep: Vec<usize> = (0..fixed.len()).filter(|&p| !is_intercept(&fixed[p])).collect();
    let mut header = vec![response.to_string()];
    header.extend(keep.iter().map(|&p| fixed[p].clone()));
    header.extend(groups.iter().cloned());
    let records: Vec<Vec<String>> = (0..data.n_obs())
        .map(|i| {
            let mut row = vec![data.y()[i].to_string()];
            row.extend(keep.iter().map(|&p| data.x(i, p).to_string()));
            for block in data.blocks() {
                let g = block.group_of(i);
                row.push(block.labels().get(g).cloned().unwrap_or_else(|| g.to_string()));
            }
            row
        })
        .collect();
    write_csv(path, &header, &records)
}

/// Sidecar describing the chain CSV files of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub layout: TraceLayout,
    pub config: SamplerConfig,
    pub has_dispersion: bool,
    pub chains: Vec<ChainMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub seed: u64,
    pub file: String,
    pub stats: ChainStats,
}

pub const TRACE_META: &str = "trace_meta.json";

/// Stable trace column names. Effects are named `kind[block:column]`,
/// off-diagonal factors `gamma[block:row,column]` and latent effects
/// `xi[block:group:column]`.
pub fn trace_header(layout: &TraceLayout, has_dispersion: bool) -> Vec<String> {
    let mut h: Vec<String> = vec!["iteration".into(), "log_likelihood".into(), "log_posterior".into()];
    for name in &layout.fixed_names {
        h.push(format!("J[{name}]"));
        h.push(format!("beta[{name}]"));
    }
    for b in &layout.blocks {
        for c in &b.columns {
            h.push(format!("I[{}:{c}]", b.name));
            h.push(format!("lambda[{}:{c}]", b.name));
        }
        for u in 1..b.columns.len() {
            for v in 0..u {
                h.push(format!("gamma[{}:{},{}]", b.name, b.columns[u], b.columns[v]));
            }
        }
        for c in &b.columns {
            h.push(format!("kappa[{}:{c}]", b.name));
        }
        for g in &b.group_labels {
            for c in &b.columns {
                h.push(format!("xi[{}:{g}:{c}]", b.name));
            }
        }
    }
    if has_dispersion {
        h.push("dispersion".into());
    }
    h
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

fn draw_record(d: &Draw) -> Vec<String> {
    let mut r = vec![
        d.iteration.to_string(),
        d.log_likelihood.to_string(),
        d.log_posterior.to_string(),
    ];
    for (b, j) in d.beta.iter().zip(&d.fixed_included) {
        r.push(flag(*j));
        r.push(b.to_string());
    }
    for block in &d.blocks {
        for (l, i) in block.lambda.iter().zip(&block.included) {
            r.push(flag(*i));
            r.push(l.to_string());
        }
        r.extend(block.gamma.iter().map(f64::to_string));
        r.extend(block.kappa.iter().map(f64::to_string));
        r.extend(block.xi.iter().map(f64::to_string));
    }
    if let Some(s) = d.dispersion {
        r.push(s.to_string());
    }
    r
}

/// Writes one CSV per chain and the sidecar into `dir`.
pub fn write_trace(dir: impl AsRef<Path>, trace: &Trace) -> Result<()> {
    let dir = dir.as_ref();
    let has_dispersion = trace.draws().next().is_some_and(|d| d.dispersion.is_some());
    let header = trace_header(&trace.layout, has_dispersion);
    let mut chains = Vec::with_capacity(trace.chains.len());
    for c in &trace.chains {
        let file = format!("trace_chain{}.csv", c.chain + 1);
        let records: Vec<Vec<String>> = c.draws.iter().map(draw_record).collect();
        write_csv(dir.join(&file), &header, &records)?;
        chains.push(ChainMeta {
            chain: c.chain,
            seed: c.seed,
            file,
            stats: c.stats.clone(),
        });
    }
    write_json(
        dir.join(TRACE_META),
        &TraceMeta {
            layout: trace.layout.clone(),
            config: trace.config.clone(),
            has_dispersion,
            chains,
        },
    )
}

/// Reads a trace written by [`write_trace`].
pub fn read_trace(dir: impl AsRef<Path>) -> Result<Trace> {
    let dir = dir.as_ref();
    let meta: TraceMeta = read_json(dir.join(TRACE_META))?;
    let header = trace_header(&meta.layout, meta.has_dispersion);
    let mut chains = Vec::with_capacity(meta.chains.len());
    for c in &meta.chains {
        let path = dir.join(&c.file);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let found: Vec<&str> = rdr.headers()?.iter().collect();
        if found != header {
            return Err(parse_error(
                path.display().to_string(),
                "header does not match trace_meta.json",
            ));
        }
        let mut draws = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let location = || format!("{} line {}", path.display(), r + 2);
            let mut cells = rec.iter().enumerate();
            let mut next = || -> Result<f64> {
                let (i, cell) = cells.next().ok_or_else(|| parse_error(location(), "too few fields"))?;
                cell.parse()
                    .map_err(|_| parse_error(format!("{} column '{}'", location(), header[i]), "not a number"))
            };
            draws.push(parse_draw(&meta, &mut next)?);
        }
        chains.push(ChainTrace {
            chain: c.chain,
            seed: c.seed,
            draws,
            stats: c.stats.clone(),
        });
    }
    Ok(Trace {
        layout: meta.layout,
        config: meta.config,
        chains,
    })
}

fn parse_draw(meta: &TraceMeta, next: &mut impl FnMut() -> Result<f64>) -> Result<Draw> {
    let iteration = next()? as usize;
    let log_likelihood = next()?;
    let log_posterior = next()?;
    let l = meta.layout.fixed_names.len();
    let (mut beta, mut fixed_included) = (Vec::with_capacity(l), Vec::with_capacity(l));
    for _ in 0..l {
        fixed_included.push(next()? != 0.0);
        beta.push(next()?);
    }
    let mut blocks = Vec::with_capacity(meta.layout.blocks.len());
    for b in &meta.layout.blocks {
        let q = b.columns.len();
        let (mut lambda, mut included) = (Vec::with_capacity(q), Vec::with_capacity(q));
        for _ in 0..q {
            included.push(next()? != 0.0);
            lambda.push(next()?);
        }
        let gamma = (0..q * q.saturating_sub(1) / 2)
            .map(|_| next())
            .collect::<Result<_>>()?;
        let kappa = (0..q).map(|_| next()).collect::<Result<_>>()?;
        let xi = (0..q * b.group_labels.len()).map(|_| next()).collect::<Result<_>>()?;
        blocks.push(BlockDraw {
            lambda,
            included,
            gamma,
            xi,
            kappa,
        });
    }
    let dispersion = if meta.has_dispersion { Some(next()?) } else { None };
    Ok(Draw {
        iteration,
        log_likelihood,
        log_posterior,
        beta,
        fixed_included,
        blocks,
        dispersion,
    })
}
