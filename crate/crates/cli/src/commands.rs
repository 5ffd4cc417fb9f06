use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use ssvs_glmm::io;
use ssvs_glmm::ppc::{self, PpcSummary, Replication};
use ssvs_glmm::sampler::diagnostics;
use ssvs_glmm::select::{self, GridTable, SelectionReport};
use ssvs_glmm::simulate::{self, GridPoint, SimDesign};
use ssvs_glmm::{run_chains, ModelSpec, SamplerConfig, SelectionMode, Trace};

use crate::{
    Command, DesignArgs, FitArgs, GridArgs, PpcArgs, PresetArg, ReplicateArgs, ReportArgs, SamplerArgs, SimulateArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
        Command::Replicate(a) => replicate(a),
        Command::Grid(a) => grid(a),
        Command::Ppc(a) => ppc(a),
        Command::Report(a) => report(a),
    }
}

fn apply(args: &SamplerArgs, config: &mut SamplerConfig) -> Result<()> {
    let SamplerArgs {
        seed,
        chains,
        adapt,
        burn_in,
        kept,
        thin,
    } = args.clone();
    if let Some(v) = seed {
        config.seed = v;
    }
    if let Some(v) = chains {
        config.chains = v;
    }
    if let Some(v) = adapt {
        config.adapt = v;
    }
    if let Some(v) = burn_in {
        config.burn_in = v;
    }
    if let Some(v) = kept {
        config.kept = v;
    }
    if let Some(v) = thin {
        config.thin = v;
    }
    let problems = config.problems();
    if !problems.is_empty() {
        bail!("{}", problems.join("; "));
    }
    Ok(())
}

fn load_design(args: &DesignArgs) -> Result<SimDesign> {
    let mut design = match &args.design {
        Some(path) => io::read_json::<SimDesign>(path).with_context(|| format!("reading design {}", path.display()))?,
        None => match args.preset {
            PresetArg::Reference => SimDesign::reference(simulate::Case::Sparse),
            PresetArg::Scaled => SimDesign::scaled(simulate::Case::Sparse),
        },
    };
    if let Some(c) = args.case {
        design.case = c.into();
    }
    if let Some(r) = args.replicates {
        design.replicates = r;
    }
    if let Some(s) = args.design_seed {
        design.seed = s;
    }
    design.validate()?;
    Ok(design)
}

fn template(path: Option<&Path>) -> Result<ModelSpec> {
    match path {
        Some(p) => Ok(io::parse_spec(p).with_context(|| format!("reading spec {}", p.display()))?),
        None => Ok(SimDesign::scaled(simulate::Case::Sparse).model_spec(SelectionMode::SsvsFull, Default::default())),
    }
}

fn write_table(dir: &Path, stem: &str, header: &[String], records: &[Vec<String>]) -> Result<()> {
    io::write_csv(dir.join(format!("{stem}.csv")), header, records)?;
    io::write_atomic(
        dir.join(format!("{stem}.txt")),
        select::aligned_text(header, records).as_bytes(),
    )?;
    Ok(())
}

fn strings<const N: usize>(h: [&str; N]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

/// Writes the selection report and convergence table of `trace`.
fn write_reports(dir: &Path, trace: &Trace, top: usize, rhat_threshold: f64) -> Result<()> {
    let report = select::top_models(trace, top)?;
    write_table(
        dir,
        "models",
        &SelectionReport::header(),
        &report.records(&trace.layout),
    )?;
    write_table(
        dir,
        "inclusion",
        &strings(["effect", "kind", "probability"]),
        &report.inclusion_records(&trace.layout),
    )?;
    let monitors = diagnostics::monitors(trace);
    write_table(
        dir,
        "diagnostics",
        &strings(diagnostics::MONITOR_HEADER),
        &diagnostics::monitor_records(&monitors),
    )?;
    let bad = diagnostics::unconverged(&monitors, rhat_threshold);
    if !bad.is_empty() {
        let names: Vec<&str> = bad.iter().map(|m| m.name.as_str()).collect();
        eprintln!(
            "warning: R-hat above {rhat_threshold} or undefined for {} monitored quantities: {}",
            bad.len(),
            names.join(", ")
        );
    }
    print!(
        "{}",
        select::aligned_text(&SelectionReport::header(), &report.records(&trace.layout))
    );
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let mut spec = io::parse_spec(&a.spec).with_context(|| format!("reading spec {}", a.spec.display()))?;
    if let Some(m) = a.mode {
        spec.mode = m.into();
    }
    apply(&a.sampler, &mut spec.sampler)?;
    let data = io::load_dataset(&a.data, &spec, a.add_squares)?;
    let trace = run_chains(&spec, &data, &spec.sampler)?;
    io::write_trace(&a.out, &trace)?;
    io::write_json(a.out.join("spec.json"), &spec)?;
    write_reports(&a.out, &trace, a.top, spec.sampler.rhat_threshold)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let design = load_design(&a.design)?;
    io::write_json(a.out.join("design.json"), &design)?;
    let names = design.fixed_names();
    for r in 0..design.replicates {
        let (data, truth) = simulate::simulate_dataset(&design, r)?;
        io::write_dataset(
            a.out.join(format!("dataset_{r}.csv")),
            &data,
            "y",
            &names,
            &["subject".to_string()],
        )?;
        io::write_json(a.out.join(format!("truth_{r}.json")), &truth)?;
    }
    let spec = design.model_spec(SelectionMode::SsvsFull, Default::default());
    io::write_json(a.out.join("spec.json"), &spec)?;
    println!("wrote {} datasets to {}", design.replicates, a.out.display());
    Ok(())
}

fn replicate(a: ReplicateArgs) -> Result<()> {
    let design = load_design(&a.design)?;
    let template = template(a.spec.as_deref())?;
    let mut config = template.sampler.clone();
    apply(&a.sampler, &mut config)?;
    let mut modes: Vec<SelectionMode> = Vec::new();
    for m in &a.mode {
        let m = SelectionMode::from(*m);
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    let result = simulate::run_replication(&design, &template, &config, &modes)?;
    io::write_csv(
        a.out.join("replicates.csv"),
        &simulate::ReplicationResult::ROW_HEADER,
        &result.row_records(),
    )?;
    write_table(
        &a.out,
        "summary",
        &strings(simulate::ReplicationResult::SUMMARY_HEADER),
        &result.summary_records(),
    )?;
    let table = result.model_table(a.top);
    write_table(&a.out, "models", &table.header(), &table.records(None))?;
    print!("{}", select::aligned_text(&table.header(), &table.records(None)));
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GridFile {
    Points(Vec<GridPoint>),
    Axes { h: Vec<f64>, v: Vec<f64> },
}

impl GridFile {
    fn points(self) -> Vec<GridPoint> {
        match self {
            GridFile::Points(p) => p,
            GridFile::Axes { h, v } => h
                .iter()
                .flat_map(|&h| v.iter().map(move |&v| GridPoint { h, v }))
                .collect(),
        }
    }
}

fn grid(a: GridArgs) -> Result<()> {
    let base = load_design(&a.design)?;
    let points = match &a.grid {
        Some(p) => io::read_json::<GridFile>(p)
            .with_context(|| format!("reading grid {}", p.display()))?
            .points(),
        None => simulate::reference_grid(),
    };
    if points.is_empty() {
        bail!("grid has no points");
    }
    let designs: Vec<SimDesign> = if a.cases.is_empty() {
        vec![base]
    } else {
        a.cases.iter().map(|&c| base.with_case(c.into())).collect()
    };
    let template = template(a.spec.as_deref())?;
    let mut config = template.sampler.clone();
    apply(&a.sampler, &mut config)?;
    let runs = simulate::run_grid(&designs, &points, &template, &config, a.mode.into())?;
    let cells = simulate::grid_cells(&runs);
    let table = select::grid_report(&cells)?;
    io::write_csv(a.out.join("grid.csv"), &GridTable::HEADER, &table.records())?;
    io::write_atomic(a.out.join("grid.txt"), table.to_text().as_bytes())?;
    let mut rows = Vec::new();
    for run in &runs {
        for r in run.result.row_records() {
            let mut row = vec![
                run.case.number().to_string(),
                run.point.h.to_string(),
                run.point.v.to_string(),
            ];
            row.extend(r);
            rows.push(row);
        }
    }
    let mut header = strings(["case", "h", "v"]);
    header.extend(strings(simulate::ReplicationResult::ROW_HEADER));
    io::write_csv(a.out.join("cells.csv"), &header, &rows)?;
    print!("{}", table.to_text());
    Ok(())
}

fn ppc(a: PpcArgs) -> Result<()> {
    let spec = io::parse_spec(&a.spec).with_context(|| format!("reading spec {}", a.spec.display()))?;
    let data = io::load_dataset(&a.data, &spec, a.add_squares)?;
    let trace = io::read_trace(&a.trace)?;
    let how = if a.marginal {
        Replication::Marginal
    } else {
        Replication::Conditional
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let reps = ppc::replicate_data(&trace, &spec, &data, a.replicates, how, &mut rng)?;
    let summary = PpcSummary::new(data.y(), &reps, spec.family.is_count())?;
    io::write_csv(
        a.out.join("scatter.csv"),
        &PpcSummary::SCATTER_HEADER,
        &summary.scatter_records(),
    )?;
    if !summary.rootogram.is_empty() {
        io::write_csv(
            a.out.join("rootogram.csv"),
            &PpcSummary::ROOTOGRAM_HEADER,
            &summary.rootogram_records(),
        )?;
    }
    if reps.len() >= 3 {
        let inside = summary.observed_inside(0.95)?;
        println!(
            "observed mean {:.4} sd {:.4}: {} the central 95% of {} replicates",
            summary.observed.0,
            summary.observed.1,
            if inside { "inside" } else { "outside" },
            reps.len()
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let trace = io::read_trace(&a.trace)?;
    write_reports(&a.out, &trace, a.top, a.rhat_threshold)
}
