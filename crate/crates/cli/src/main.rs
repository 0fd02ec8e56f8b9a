//! `pdflood` command-line tool.
//!
//! Exit codes: 0 on success, 2 for input or alignment errors, 3 for
//! numerical failures. Errors are reported as one JSON object on stderr.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "pdflood", version, about = "Probabilistic downscaling of coarse flood-depth projections")]
struct Cli {
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Probabilistic downscaling: mean, 95% interval and exceedance grids
    Downscale(RunArgs),
    /// Deterministic cost-grow downscaling without uncertainty
    Baseline(RunArgs),
    /// Emulate design runs and calibrate roughness
    Calibrate(CalibrateArgs),
    /// Write a synthetic floodplain case with its truth
    Synth(SynthArgs),
    /// Score downscaled products against a truth grid
    Evaluate(EvaluateArgs),
}

/// Paths and settings shared by `downscale` and `baseline`. Flags override
/// the JSON config.
#[derive(Args, Debug)]
pub struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fine_dem: Option<PathBuf>,
    #[arg(long)]
    pub coarse_dem: Option<PathBuf>,
    #[arg(long)]
    pub coarse_depth: Option<PathBuf>,
    /// High-water mark CSV (x,y,depth_m)
    #[arg(long)]
    pub hwm: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fine cells per coarse cell side; inferred from the DEMs when omitted
    #[arg(long)]
    pub factor: Option<usize>,
    /// Flooding threshold in metres
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Coarse depth above which a cell counts as wet
    #[arg(long)]
    pub wet_threshold: Option<f64>,
    /// Elevation bins for the flooding-probability curve
    #[arg(long)]
    pub bins: Option<usize>,
    /// Decimal places written to output grids (default: full precision)
    #[arg(long)]
    pub precision: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Design CSV (theta,loc_1,...,loc_n)
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// Observation CSV (z_1,...,z_n)
    #[arg(long)]
    pub obs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON config with a `scenario` object
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for terrain, marks and coarse error; required without a config scenario
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Truth depth grid
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// NAME=PATH; PATH is a downscale output directory or a single depth grid
    #[arg(long = "product", value_name = "NAME=PATH")]
    pub products: Vec<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Only score the MAE over cells wet in truth or prediction
    #[arg(long)]
    pub wet_union: bool,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    code: &'a str,
    message: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }

    let result = match cli.command {
        Command::Downscale(a) => run::downscale(a),
        Command::Baseline(a) => run::baseline(a),
        Command::Calibrate(a) => run::calibrate(a),
        Command::Synth(a) => run::synth(a),
        Command::Evaluate(a) => run::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                code: e.code(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("error report serialises"));
            ExitCode::from(e.exit_status())
        }
    }
}
