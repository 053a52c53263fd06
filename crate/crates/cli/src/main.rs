//! `hmm-order`: simulate, preprocess, fit, benchmark and report.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{pick, FileConfig};
use crate::error::{CliError, EXIT_CONFIG};

pub const OUT_DIR_ENV: &str = "HMM_ORDER_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "hmm-order", version, about = "Order selection for hidden Markov models")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for default output paths [default: $HMM_ORDER_OUT_DIR or .]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write observations plus a truth sidecar.
    Simulate(SimulateArgs),
    /// Turn raw GPS tracks into hourly step/angle series.
    Preprocess(PreprocessArgs),
    /// Fit a model and select its order.
    Fit(FitArgs),
    /// Run the replicated simulation grid.
    Benchmark(BenchmarkArgs),
    /// Print a table from a benchmark or fit JSON file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: Option<u8>,
    /// Length of each series.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Number of individuals [default: 10 for scenarios 3–5, else 1]
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file stem [default: scenario<S>_T<T>_seed<seed>]
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Track CSV with columns id,timestamp,lat,lon[,covariates...].
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub gap_hours: Option<usize>,
    #[arg(long)]
    pub min_fixes: Option<usize>,
    #[arg(long)]
    pub max_missing_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Observation CSV or processed step/angle CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// mle or dpmle [default: dpmle]
    #[arg(long)]
    pub method: Option<String>,
    /// Orders compared by AIC/BIC [default: 2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<usize>>,
    /// Upper order of the penalized fit [default: 4]
    #[arg(long)]
    pub n_upper: Option<usize>,
    /// Random (λ, C_N) draws [default: 50]
    #[arg(long)]
    pub draws: Option<usize>,
    /// Random starts [default: 10 for mle, 9 for dpmle]
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Covariate-dependent transition probabilities.
    #[arg(long)]
    pub nonstationary: bool,
    /// Covariate columns used by the transition model [default: all]
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Emission family per channel: gamma, normal, von_mises.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    /// Likelihood scored by NIC: unmerged or merged [default: unmerged]
    #[arg(long)]
    pub likelihood: Option<String>,
    /// Search range of log(Mλ) as lo,hi [default: 1,5]
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub log_m_lambda: Option<Vec<f64>>,
    /// Search range of C_N as lo,hi [default: 1,5]
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub c_n: Option<Vec<f64>>,
    /// SCAD shape constant [default: 3.7]
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub merge_tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Exit with the convergence code when the selected fit did not converge.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<u8>>,
    /// Series lengths.
    #[arg(long, visible_alias = "T", value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any of aic, bic, dpmle, dpmle-cov.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<usize>>,
    #[arg(long)]
    pub n_upper: Option<usize>,
    #[arg(long)]
    pub ic_restarts: Option<usize>,
    #[arg(long)]
    pub dpmle_restarts: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub likelihood: Option<String>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Output file stem [default: benchmark]
    #[arg(long)]
    pub name: Option<String>,
    /// Validate the configuration and print the grid without fitting.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Benchmark or fit JSON.
    pub input: PathBuf,
    /// Also write the long-format CSV of a benchmark report here.
    #[arg(long)]
    pub long: Option<PathBuf>,
}

/// Settings shared by every command.
pub struct Context {
    pub file: FileConfig,
    pub out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let env_dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let out_dir = pick(cli.out_dir, file.out_dir.clone(), env_dir.unwrap_or_else(|| PathBuf::from(".")));
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::Config("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let ctx = Context { file, out_dir };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Preprocess(a) => commands::preprocess(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Benchmark(a) => commands::benchmark(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
