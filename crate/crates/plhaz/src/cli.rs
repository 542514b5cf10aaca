//! Implementations behind the `plhaz` binary's subcommands. Each command
//! resolves its configuration, runs the pipeline, and writes its artifacts
//! plus a JSON run manifest alongside the primary output. All outputs are
//! written atomically (temp file + rename) and are bit-reproducible given
//! the same configuration and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::{load_csv, to_csv_string};
use crate::error::{Error, Result};
use crate::fit::{fit_refined, FitConfig, FitResult};
use crate::inference::{cross_fit_residuals, information, wald_ci, InformationEstimate};
use crate::sim::{replicate, replicate_oracle, simulate, SimConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record written next to every command's primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Fully resolved configuration (all defaults materialized).
    pub config: serde_json::Value,
    /// Paths of every artifact the command wrote.
    pub artifacts: Vec<String>,
    pub duration_seconds: f64,
}

/// Writes `contents` to `path` via a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension()
            .map(|e| e.to_string_lossy().to_string())
            .unwrap_or_default()
    ));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(".manifest.json");
    primary.with_file_name(name)
}

fn write_manifest(
    command: &str,
    seed: u64,
    config: serde_json::Value,
    artifacts: &[&Path],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: VERSION.to_string(),
        seed,
        config,
        artifacts: artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    let primary = artifacts
        .first()
        .ok_or_else(|| Error::config("command produced no artifacts"))?;
    write_atomic(
        &manifest_path(primary),
        &serde_json::to_string_pretty(&manifest)?,
    )
}

#[derive(Debug, Clone)]
pub struct SimulateOpts {
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub theta: Option<Vec<f64>>,
    pub tau: f64,
    pub censor_rate: f64,
    pub base_rate: f64,
}

/// `simulate`: draw a dataset from the benchmark design and write it as CSV.
pub fn cmd_simulate(opts: &SimulateOpts) -> Result<()> {
    let started = Instant::now();
    let config = SimConfig {
        n: opts.n,
        seed: opts.seed,
        theta_true: opts
            .theta
            .clone()
            .unwrap_or_else(|| SimConfig::default().theta_true),
        tau: opts.tau,
        censor_rate: opts.censor_rate,
        base_rate: opts.base_rate,
    };
    let dataset = simulate(&config)?;
    write_atomic(&opts.out, &to_csv_string(&dataset))?;
    write_manifest(
        "simulate",
        opts.seed,
        serde_json::to_value(&config)?,
        &[&opts.out],
        started,
    )
}

#[derive(Debug, Clone, Default)]
pub struct FitOpts {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Optional JSON file overriding FitConfig defaults.
    pub config: Option<PathBuf>,
    pub grid_size: Option<usize>,
    pub seed: Option<u64>,
}

/// Loads a FitConfig from defaults, an optional JSON file, and CLI
/// overrides, in that order.
pub fn resolve_fit_config(
    config_path: Option<&Path>,
    grid_size: Option<usize>,
    seed: Option<u64>,
) -> Result<FitConfig> {
    let mut config = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<FitConfig>(&text).map_err(|e| {
                Error::config(format!("invalid fit config {}: {e}", path.display()))
            })?
        }
        None => FitConfig::default(),
    };
    if let Some(g) = grid_size {
        config.grid_size = Some(g);
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

/// `fit`: train on a CSV dataset, refine θ, and write the checkpoint
/// (model state, θ, training history) as JSON.
pub fn cmd_fit(opts: &FitOpts) -> Result<()> {
    let started = Instant::now();
    let dataset = load_csv(&opts.data)?;
    let config = resolve_fit_config(opts.config.as_deref(), opts.grid_size, opts.seed)?;
    let result = fit_refined(&dataset, &config)?;
    write_atomic(&opts.out, &serde_json::to_string_pretty(&result)?)?;
    log::info!(
        "fit: theta = {:?}, {} epochs, best epoch {}",
        result.state.theta.to_vec(),
        result.epochs_run,
        result.best_epoch
    );
    write_manifest(
        "fit",
        config.seed,
        serde_json::to_value(&config)?,
        &[&opts.out],
        started,
    )
}

#[derive(Debug, Clone)]
pub struct InferOpts {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub levels: Vec<f64>,
    pub folds: usize,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// JSON document produced by `infer`.
#[derive(Debug, Serialize)]
pub struct InferOutput {
    pub theta: Vec<f64>,
    pub levels: Vec<f64>,
    /// intervals[level][coordinate] = [lower, upper].
    pub intervals: Vec<Vec<(f64, f64)>>,
    pub information: InformationEstimate,
}

/// `infer`: cross-fitted efficient-information standard errors and Wald
/// intervals for the θ stored in a fit checkpoint.
pub fn cmd_infer(opts: &InferOpts) -> Result<()> {
    let started = Instant::now();
    let dataset = load_csv(&opts.data)?;
    let checkpoint_text = std::fs::read_to_string(&opts.checkpoint)?;
    let checkpoint: FitResult = serde_json::from_str(&checkpoint_text)
        .map_err(|e| Error::config(format!("invalid checkpoint: {e}")))?;
    let config = resolve_fit_config(opts.config.as_deref(), None, opts.seed)?;
    let cf = cross_fit_residuals(&dataset, opts.folds, &config)?;
    let info = information(cf.residuals.view(), dataset.len())?;
    let theta = checkpoint.state.theta.to_vec();
    let mut intervals = Vec::with_capacity(opts.levels.len());
    for &level in &opts.levels {
        intervals.push(wald_ci(&theta, &info, level)?);
    }
    let output = InferOutput {
        theta,
        levels: opts.levels.clone(),
        intervals,
        information: info,
    };
    write_atomic(&opts.out, &serde_json::to_string_pretty(&output)?)?;
    write_manifest(
        "infer",
        config.seed,
        serde_json::json!({
            "fit": config,
            "folds": opts.folds,
            "levels": opts.levels,
        }),
        &[&opts.out],
        started,
    )
}

#[derive(Debug, Clone)]
pub struct ReplicateOpts {
    pub reps: usize,
    pub n: usize,
    pub seed: u64,
    pub levels: Vec<f64>,
    pub folds: usize,
    pub jobs: Option<usize>,
    pub out_prefix: PathBuf,
    pub theta: Option<Vec<f64>>,
    pub tau: f64,
    pub censor_rate: f64,
    pub base_rate: f64,
    pub config: Option<PathBuf>,
    pub grid_size: Option<usize>,
    /// Fix the nuisance at its true form and estimate θ only.
    pub oracle: bool,
}

/// `replicate`: Monte Carlo study over independent simulated datasets.
/// Writes the JSON report, the aligned text table, and the per-replication
/// CSV log under the given prefix. `--jobs` bounds replication-level
/// parallelism; the merged report is independent of the thread count.
pub fn cmd_replicate(opts: &ReplicateOpts) -> Result<()> {
    let started = Instant::now();
    let sim_config = SimConfig {
        n: opts.n,
        seed: opts.seed,
        theta_true: opts
            .theta
            .clone()
            .unwrap_or_else(|| SimConfig::default().theta_true),
        tau: opts.tau,
        censor_rate: opts.censor_rate,
        base_rate: opts.base_rate,
    };
    let fit_config = resolve_fit_config(opts.config.as_deref(), opts.grid_size, Some(opts.seed))?;
    let run = || {
        if opts.oracle {
            replicate_oracle(&sim_config, opts.reps, &opts.levels, fit_config.grid_size)
        } else {
            replicate(&sim_config, &fit_config, opts.reps, &opts.levels, opts.folds)
        }
    };
    let report = match opts.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::config(format!("could not build thread pool: {e}")))?;
            pool.install(run)?
        }
        None => run()?,
    };

    let json_path = with_suffix(&opts.out_prefix, ".report.json");
    let table_path = with_suffix(&opts.out_prefix, ".table.txt");
    let csv_path = with_suffix(&opts.out_prefix, ".reps.csv");
    write_atomic(&json_path, &serde_json::to_string_pretty(&report)?)?;
    write_atomic(&table_path, &report.to_table())?;
    write_atomic(&csv_path, &report.replication_csv())?;
    print!("{}", report.to_table());
    write_manifest(
        "replicate",
        opts.seed,
        serde_json::json!({
            "sim": sim_config,
            "fit": fit_config,
            "reps": opts.reps,
            "levels": opts.levels,
            "folds": opts.folds,
            "oracle": opts.oracle,
        }),
        &[&json_path, &table_path, &csv_path],
        started,
    )
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "study".to_string());
    name.push_str(suffix);
    prefix.with_file_name(name)
}

/// Maps errors onto stable process exit codes: 0 success, 2 usage or
/// configuration, 3 ingestion or I/O, 4 numerical or training, 5 inference
/// (including singular information), 6 estimation.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Json(_) => 2,
        Error::Ingest { .. } | Error::Io(_) | Error::Csv(_) => 3,
        Error::Numerical(_) | Error::Training(_) => 4,
        Error::Inference(_) => 5,
        Error::Estimation(_) => 6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let codes = [
            exit_code(&Error::config("x")),
            exit_code(&Error::Ingest {
                row: 1,
                message: "x".into(),
            }),
            exit_code(&Error::numerical("x")),
            exit_code(&Error::Inference("x".into())),
            exit_code(&Error::Estimation("x".into())),
        ];
        let mut unique = codes.to_vec();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), codes.len());
        assert!(codes.iter().all(|&c| c != 0));
    }

    #[test]
    fn manifest_path_appends_suffix() {
        assert_eq!(
            manifest_path(Path::new("/tmp/data.csv")),
            PathBuf::from("/tmp/data.csv.manifest.json")
        );
    }

    #[test]
    fn suffix_paths_share_prefix() {
        let p = with_suffix(Path::new("/tmp/study"), ".report.json");
        assert_eq!(p, PathBuf::from("/tmp/study.report.json"));
    }

    #[test]
    fn write_atomic_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, "first").unwrap();
        write_atomic(&path, "second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        // No stray temp file left behind.
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
