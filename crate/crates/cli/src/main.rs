//! `ssvs`: fit, simulate, replicate, grid, ppc and report subcommands.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssvs_glmm::simulate::Case;
use ssvs_glmm::SelectionMode;

#[derive(Parser, Debug)]
#[command(
    name = "ssvs",
    version,
    about = "Bayesian variable selection for generalized linear mixed models"
)]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "SSVS_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model to a data file and write the trace and reports.
    Fit(FitArgs),
    /// Write simulated datasets and their generating values.
    Simulate(SimulateArgs),
    /// Simulate and fit replicates, tabulating the modal models.
    Replicate(ReplicateArgs),
    /// Run replicates over a grid of slab hyperparameters.
    Grid(GridArgs),
    /// Posterior predictive rootogram and mean/sd scatter data.
    Ppc(PpcArgs),
    /// Summarize a saved trace.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Basic,
    Diagonal,
    Full,
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Basic => SelectionMode::NoSelection,
            ModeArg::Diagonal => SelectionMode::SsvsDiagonal,
            ModeArg::Full => SelectionMode::SsvsFull,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// Ten fixed and ten random effects.
    Reference,
    /// Six fixed and six random effects.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaseArg {
    #[value(name = "1")]
    Sparse,
    #[value(name = "2")]
    SmallSignal,
}

impl From<CaseArg> for Case {
    fn from(c: CaseArg) -> Self {
        match c {
            CaseArg::Sparse => Case::Sparse,
            CaseArg::SmallSignal => Case::SmallSignal,
        }
    }
}

/// Overrides for the sampler settings of a spec.
#[derive(Args, Debug, Clone, Default)]
pub struct SamplerArgs {
    /// Base seed; chain c uses seed + c.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub adapt: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub kept: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
}

/// Where a simulation design comes from.
#[derive(Args, Debug, Clone)]
pub struct DesignArgs {
    /// Design JSON file.
    #[arg(long, conflicts_with = "preset")]
    pub design: Option<PathBuf>,
    /// Built-in design, used when no file is given.
    #[arg(long, value_enum, default_value = "scaled")]
    pub preset: PresetArg,
    /// Override the design's case.
    #[arg(long, value_enum)]
    pub case: Option<CaseArg>,
    /// Override the number of replicates.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Override the simulation seed.
    #[arg(long)]
    pub design_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the spec's selection mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Compute missing `name^2` columns as squares of `name`.
    #[arg(long)]
    pub add_squares: bool,
    /// Models listed in the report.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplicateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    /// Spec supplying hyperparameters, priors and sampler settings.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Modes to fit; repeat or comma-separate.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["diagonal", "full"])]
    pub mode: Vec<ModeArg>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    /// Grid JSON: a list of `{"h", "v"}` points or `{"h": [...], "v": [...]}`.
    /// Defaults to h in {0.1, 1, 10} by v = nu in {0.01, 1, 5}.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Cases to run; the design's own case when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub cases: Vec<CaseArg>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug)]
pub struct PpcArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    /// Draw fresh random effects instead of reusing the fitted ones.
    #[arg(long)]
    pub marginal: bool,
    #[arg(long)]
    pub add_squares: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, default_value_t = 1.1)]
    pub rhat_threshold: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
