//! Thin CLI over the library pipeline: `simulate | fit | infer | replicate`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use plhaz::cli::{
    cmd_fit, cmd_infer, cmd_replicate, cmd_simulate, exit_code, FitOpts, InferOpts,
    ReplicateOpts, SimulateOpts,
};

#[derive(Parser)]
#[command(name = "plhaz", version, about = "Partially linear hazard regression with a neural nuisance component")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DesignArgs {
    /// True linear coefficients of the simulated design.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    /// Administrative censoring horizon.
    #[arg(long, default_value_t = 30.0)]
    tau: f64,
    /// Exponential censoring hazard rate (0 disables random censoring).
    #[arg(long = "censor-rate", default_value_t = 1.0 / 12.0)]
    censor_rate: f64,
    /// Multiplicative baseline of the hazard.
    #[arg(long = "base-rate", default_value_t = 0.1)]
    base_rate: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from the benchmark design and write it as CSV.
    Simulate {
        /// Number of subjects.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Fit the model to a CSV dataset and write the checkpoint JSON.
    Fit {
        /// Input CSV (schema: time,event,x1..xd,z1..zp).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// JSON file overriding training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Equally spaced grid points (default min(n, 512)).
        #[arg(long = "grid-size")]
        grid_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Standard errors and Wald intervals for a fitted checkpoint.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Confidence levels.
        #[arg(long, value_delimiter = ',', default_values_t = [0.90, 0.95])]
        levels: Vec<f64>,
        /// Cross-fitting folds.
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// JSON file overriding the projection networks' training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo replication study of the full pipeline.
    Replicate {
        #[arg(long)]
        reps: usize,
        /// Subjects per replication.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix for .report.json, .table.txt, .reps.csv.
        #[arg(long = "out-prefix")]
        out_prefix: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.90, 0.95])]
        levels: Vec<f64>,
        /// Replication-level parallelism (default: PLHAZ_JOBS or all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// JSON file overriding training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "grid-size")]
        grid_size: Option<usize>,
        /// Fix the nuisance at its true form; estimate θ only.
        #[arg(long, default_value_t = false)]
        oracle: bool,
        #[command(flatten)]
        design: DesignArgs,
    },
}

fn default_jobs() -> Option<usize> {
    std::env::var("PLHAZ_JOBS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&j| j > 0)
}

fn run(cli: Cli) -> plhaz::Result<()> {
    match cli.command {
        Command::Simulate {
            n,
            seed,
            out,
            design,
        } => {
            if n == 0 {
                return Err(plhaz::Error::Config("--n must be at least 1".into()));
            }
            cmd_simulate(&SimulateOpts {
                n,
                seed,
                out,
                theta: design.theta,
                tau: design.tau,
                censor_rate: design.censor_rate,
                base_rate: design.base_rate,
            })
        }
        Command::Fit {
            data,
            out,
            config,
            grid_size,
            seed,
        } => cmd_fit(&FitOpts {
            data,
            out,
            config,
            grid_size,
            seed,
        }),
        Command::Infer {
            data,
            checkpoint,
            out,
            levels,
            folds,
            config,
            seed,
        } => cmd_infer(&InferOpts {
            data,
            checkpoint,
            out,
            levels,
            folds,
            config,
            seed,
        }),
        Command::Replicate {
            reps,
            n,
            seed,
            out_prefix,
            levels,
            jobs,
            folds,
            config,
            grid_size,
            oracle,
            design,
        } => {
            if reps == 0 || n == 0 {
                return Err(plhaz::Error::Config(
                    "--reps and --n must be at least 1".into(),
                ));
            }
            cmd_replicate(&ReplicateOpts {
                reps,
                n,
                seed,
                levels,
                folds,
                jobs: jobs.or_else(default_jobs),
                out_prefix,
                theta: design.theta,
                tau: design.tau,
                censor_rate: design.censor_rate,
                base_rate: design.base_rate,
                config,
                grid_size,
                oracle,
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
