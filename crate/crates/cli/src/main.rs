//! `spatial-lc`: fit, simulate and inspect spatial Lee-Carter models.
//!
//! Exit codes: 0 success, 1 input or runtime error, 2 fit finished without
//! converging (outputs are still written and flagged).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "spatial-lc", version, about = "Spatially extended Lee-Carter mortality model")]
pub struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for hyperparameter evaluations.
    #[arg(long, global = true, env = "SPATIAL_LC_THREADS")]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and write the output bundle.
    Fit(FitArgs),
    /// Simulate a dataset with its ground truth.
    Simulate(SimulateArgs),
    /// Run the reference MCMC sampler.
    Mcmc(McmcArgs),
    /// Classic SVD Lee-Carter fit on area-aggregated data.
    Classic(ClassicArgs),
    /// Rewrite the tables of a bundle from its `fit_result.json`.
    Summarize(SummarizeArgs),
    /// Join spatial effects onto a GeoJSON file.
    Geojoin(GeojoinArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub deaths: Option<PathBuf>,
    #[arg(long)]
    pub exposures: Option<PathBuf>,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Label stored with the fit (e.g. male, female).
    #[arg(long)]
    pub gender: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// `static` or `period`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Last year of the first period (period variant).
    #[arg(long)]
    pub cut_year: Option<i32>,
    /// One σ_ω and φ shared by all age groups.
    #[arg(long)]
    pub share_spatial_hyper: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draws for the compound `β_xκ_t` summaries.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub max_evaluations: Option<usize>,
    /// Simplex diameter at which the hyperparameter search stops.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Ages with compound summaries, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub selected_ages: Option<Vec<u32>>,
    /// GeoJSON with `area_id` properties; writes `omega_map.geojson`.
    #[arg(long)]
    pub geojson: Option<PathBuf>,
    /// Write the scaled spatial structure matrix as `i j value` lines.
    #[arg(long)]
    pub dump_structure: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub ages: Option<usize>,
    #[arg(long)]
    pub years: Option<usize>,
    /// Number of areas for the ring graph.
    #[arg(long)]
    pub areas: Option<usize>,
    /// `ring`, `grid` or `file`.
    #[arg(long)]
    pub graph: Option<String>,
    #[arg(long)]
    pub grid_rows: Option<usize>,
    #[arg(long)]
    pub grid_cols: Option<usize>,
    /// Adjacency file for `--graph file`.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub first_age: Option<u32>,
    #[arg(long)]
    pub first_year: Option<i32>,
    #[arg(long)]
    pub cut_year: Option<i32>,
    #[arg(long)]
    pub sigma_z: Option<f64>,
    #[arg(long)]
    pub sigma_kappa: Option<f64>,
    /// One value, or one per age group, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sigma_omega: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub phi: Option<Vec<f64>>,
    /// Person-years per cell.
    #[arg(long)]
    pub exposure: Option<f64>,
    /// Use a demographic `(α, β)` profile with `κ` falling linearly from
    /// `+trend` to `-trend` instead of drawing them from the prior.
    #[arg(long)]
    pub trend: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct McmcArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burn: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Condition on the hyperparameters instead of sampling them.
    #[arg(long)]
    pub fixed_hyper: bool,
    /// Take the (starting) hyperparameters from a `fit_result.json`.
    #[arg(long)]
    pub hyper_from: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassicArgs {
    #[arg(long)]
    pub deaths: Option<PathBuf>,
    #[arg(long)]
    pub exposures: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Bundle directory containing `fit_result.json`.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Directory for the tables (defaults to the bundle).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub selected_ages: Option<Vec<u32>>,
    /// Data files, to recompute the deviance diagnostics.
    #[arg(long)]
    pub deaths: Option<PathBuf>,
    #[arg(long)]
    pub exposures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeojoinArgs {
    /// `omega.csv` from a bundle.
    #[arg(long)]
    pub omega: PathBuf,
    #[arg(long)]
    pub geojson: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads.or(config.threads) {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command, &config) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
