//! Simulation design and Monte Carlo replication harness.
//!
//! Event times follow the nonproportional hazard
//! `h(t | X, Z) = base_rate · exp{ (0.1 + f(X)²) t + θᵀZ }` with
//! `f(x) = 0.2(x₁+x₂) + 0.5 x₁x₂ + x₃²`, X ~ U[-1,1]³ and Z ~ U[-1,1]ᵖ
//! independent. Censoring is exponential plus administrative truncation at
//! τ. Event times are drawn by inverting the cumulative hazard in closed
//! form, so the sampler can be checked exactly.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_grid, expand, Dataset, SurvivalRecord};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::fit::{fit_refined, CollapsedRows, FitConfig};
use crate::inference::{cross_fit_residuals, information, wald_ci, InformationEstimate};

/// Parameters of the data-generating mechanism.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub theta_true: Vec<f64>,
    /// Administrative censoring horizon.
    pub tau: f64,
    /// Multiplicative baseline of the hazard.
    pub base_rate: f64,
    /// Hazard rate of the exponential censoring time (0 disables random
    /// censoring). The default 1/12 yields ≈30% censoring overall.
    pub censor_rate: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 2000,
            theta_true: vec![2.0, -1.0],
            tau: 30.0,
            base_rate: 0.1,
            censor_rate: 1.0 / 12.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if self.theta_true.is_empty() {
            return Err(Error::config("theta_true must be non-empty"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.base_rate > 0.0) {
            return Err(Error::config("base_rate must be positive"));
        }
        if !(self.censor_rate >= 0.0) {
            return Err(Error::config("censor_rate must be non-negative"));
        }
        Ok(())
    }
}

/// Nuisance signal f(x) = 0.2(x₁+x₂) + 0.5 x₁x₂ + x₃².
pub fn f_nuisance(x: &[f64]) -> f64 {
    assert_eq!(x.len(), 3, "f_nuisance expects a 3-vector");
    0.2 * (x[0] + x[1]) + 0.5 * x[0] * x[1] + x[2] * x[2]
}

/// The true nuisance component of the log-hazard:
/// g(t, x) = ln(base_rate) + (0.1 + f(x)²) t.
pub fn true_log_hazard_profile(t: f64, x: &[f64], base_rate: f64) -> f64 {
    let a = 0.1 + f_nuisance(x).powi(2);
    base_rate.ln() + a * t
}

/// Inverse-transform draw of the event time: with a = 0.1 + f(x)²,
/// b = θᵀz, and E = -ln(u), the unique U with ∫₀ᵁ h = E is
/// U = ln(1 + aE / (base_rate e^b)) / a.
pub fn sample_event_time(x: &[f64], z: &[f64], theta: &[f64], config: &SimConfig, u: f64) -> f64 {
    assert!(u > 0.0 && u < 1.0, "uniform draw must lie in (0,1)");
    let a = 0.1 + f_nuisance(x).powi(2);
    let b: f64 = z.iter().zip(theta).map(|(zi, ti)| zi * ti).sum();
    let e = -u.ln();
    (a * e / (config.base_rate * b.exp())).ln_1p() / a
}

/// Cumulative hazard at time t for covariates (x, z):
/// (base_rate e^b / a)(e^{at} - 1).
pub fn cumulative_hazard(t: f64, x: &[f64], z: &[f64], theta: &[f64], config: &SimConfig) -> f64 {
    let a = 0.1 + f_nuisance(x).powi(2);
    let b: f64 = z.iter().zip(theta).map(|(zi, ti)| zi * ti).sum();
    config.base_rate * b.exp() * (a * t).exp_m1() / a
}

fn open_unit(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Draws a dataset from the design. Deterministic given the seed: per
/// subject, the draw order is X (3), Z (p), the event uniform, and the
/// censoring uniform (consumed even when censor_rate = 0).
pub fn simulate(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let p = config.theta_true.len();
    let mut records = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u_event = open_unit(&mut rng);
        let u_censor = open_unit(&mut rng);
        let event_time = sample_event_time(&x, &z, &config.theta_true, config, u_event);
        let censor_time = if config.censor_rate > 0.0 {
            (-u_censor.ln() / config.censor_rate).min(config.tau)
        } else {
            config.tau
        };
        let time = event_time.min(censor_time);
        let event = event_time <= censor_time;
        records.push(SurvivalRecord { time, event, x, z });
    }
    Dataset::from_records(records)
}

/// One successful replication of the full pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub sim_seed: u64,
    pub theta: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub censoring_fraction: f64,
    /// intervals[level][coord] = (lower, upper).
    pub intervals: Vec<Vec<(f64, f64)>>,
    /// covered[level][coord].
    pub covered: Vec<Vec<bool>>,
    pub epochs_run: usize,
    pub refine_iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub sim_seed: u64,
    pub message: String,
}

/// Per-coordinate aggregates across replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub mean_estimate: f64,
    /// Sample SD of the estimates; absent with fewer than 2 replications.
    pub empirical_sd: Option<f64>,
    pub mean_standard_error: f64,
    /// coverage[level] = fraction of replications whose interval covered
    /// the truth.
    pub coverage: Vec<f64>,
}

/// Monte Carlo study output: per-replication records plus the aggregate
/// table mirroring the usual Est / Emp SD / Est SE / coverage layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub theta_true: Vec<f64>,
    pub levels: Vec<f64>,
    pub requested: usize,
    pub replications: Vec<ReplicationRecord>,
    pub failures: Vec<ReplicationFailure>,
    pub summary: Vec<CoordinateSummary>,
    pub mean_censoring_fraction: f64,
}

impl ReplicationReport {
    fn aggregate(
        theta_true: Vec<f64>,
        levels: Vec<f64>,
        requested: usize,
        replications: Vec<ReplicationRecord>,
        failures: Vec<ReplicationFailure>,
    ) -> Result<ReplicationReport> {
        if 10 * failures.len() > requested {
            let sample = failures
                .iter()
                .take(3)
                .map(|f| format!("rep {}: {}", f.replication, f.message))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Estimation(format!(
                "{} of {requested} replications failed (> 10%): {sample}",
                failures.len()
            )));
        }
        let p = theta_true.len();
        let m = replications.len();
        if m == 0 {
            return Err(Error::Estimation(
                "no successful replications to aggregate".to_string(),
            ));
        }
        let mut summary = Vec::with_capacity(p);
        for k in 0..p {
            let estimates: Vec<f64> = replications.iter().map(|r| r.theta[k]).collect();
            let mean = estimates.iter().sum::<f64>() / m as f64;
            let empirical_sd = if m >= 2 {
                let ss = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
                Some((ss / (m as f64 - 1.0)).sqrt())
            } else {
                None
            };
            let mean_se = replications
                .iter()
                .map(|r| r.standard_errors[k])
                .sum::<f64>()
                / m as f64;
            let coverage = (0..levels.len())
                .map(|li| {
                    replications
                        .iter()
                        .filter(|r| r.covered[li][k])
                        .count() as f64
                        / m as f64
                })
                .collect();
            summary.push(CoordinateSummary {
                mean_estimate: mean,
                empirical_sd,
                mean_standard_error: mean_se,
                coverage,
            });
        }
        let mean_censoring_fraction = replications
            .iter()
            .map(|r| r.censoring_fraction)
            .sum::<f64>()
            / m as f64;
        Ok(ReplicationReport {
            theta_true,
            levels,
            requested,
            replications,
            failures,
            summary,
            mean_censoring_fraction,
        })
    }

    /// Aligned plain-text summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} replications requested, {} succeeded, {} failed; mean censoring {:.3}\n",
            self.requested,
            self.replications.len(),
            self.failures.len(),
            self.mean_censoring_fraction
        ));
        out.push_str(&format!("{:<10}{:>9}{:>9}{:>9}", "", "Est", "Emp SD", "Est SE"));
        for l in &self.levels {
            out.push_str(&format!("{:>8.0}%", l * 100.0));
        }
        out.push('\n');
        for (k, s) in self.summary.iter().enumerate() {
            out.push_str(&format!(
                "theta{:<5}{:>9.3}{:>9}{:>9.3}",
                k + 1,
                s.mean_estimate,
                s.empirical_sd
                    .map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|| "-".to_string()),
                s.mean_standard_error
            ));
            for c in &s.coverage {
                out.push_str(&format!("{:>9.3}", c));
            }
            out.push('\n');
        }
        out
    }

    /// Per-replication CSV log (one line per successful replication).
    pub fn replication_csv(&self) -> String {
        let p = self.theta_true.len();
        let mut out = String::from("replication,sim_seed,censoring_fraction");
        for k in 1..=p {
            out.push_str(&format!(",theta{k},se{k}"));
        }
        for l in &self.levels {
            for k in 1..=p {
                out.push_str(&format!(",covered{k}_{:.0}", l * 100.0));
            }
        }
        out.push('\n');
        for r in &self.replications {
            out.push_str(&format!(
                "{},{},{}",
                r.replication, r.sim_seed, r.censoring_fraction
            ));
            for k in 0..p {
                out.push_str(&format!(",{},{}", r.theta[k], r.standard_errors[k]));
            }
            for li in 0..self.levels.len() {
                for k in 0..p {
                    out.push_str(&format!(",{}", u8::from(r.covered[li][k])));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn coverage_of(
    intervals: &[Vec<(f64, f64)>],
    theta_true: &[f64],
) -> Vec<Vec<bool>> {
    intervals
        .iter()
        .map(|per_level| {
            per_level
                .iter()
                .zip(theta_true)
                .map(|(&(lo, hi), &t)| lo <= t && t <= hi)
                .collect()
        })
        .collect()
}

/// Runs the full pipeline (simulate → fit → refine → cross-fit →
/// information → Wald intervals) `reps` times with independent derived
/// seeds. Individual failures are recorded and excluded; more than 10%
/// failures aborts the study. Replications run in parallel; the merge is
/// ordered by replication index, so results do not depend on thread count.
pub fn replicate(
    sim_config: &SimConfig,
    fit_config: &FitConfig,
    reps: usize,
    levels: &[f64],
    folds: usize,
) -> Result<ReplicationReport> {
    sim_config.validate()?;
    fit_config.validate()?;
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    for &l in levels {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::config(format!("invalid confidence level {l}")));
        }
    }
    let outcomes: Vec<(usize, u64, Result<ReplicationRecord>)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sim_seed = derive_seed(sim_config.seed, 0xA000 + r as u64);
            let outcome = run_one(sim_config, fit_config, r, sim_seed, levels, folds);
            (r, sim_seed, outcome)
        })
        .collect();
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for (r, sim_seed, outcome) in outcomes {
        match outcome {
            Ok(rec) => replications.push(rec),
            Err(e) => failures.push(ReplicationFailure {
                replication: r,
                sim_seed,
                message: e.to_string(),
            }),
        }
    }
    ReplicationReport::aggregate(
        sim_config.theta_true.clone(),
        levels.to_vec(),
        reps,
        replications,
        failures,
    )
}

fn run_one(
    sim_config: &SimConfig,
    fit_config: &FitConfig,
    r: usize,
    sim_seed: u64,
    levels: &[f64],
    folds: usize,
) -> Result<ReplicationRecord> {
    let ds = simulate(&SimConfig {
        seed: sim_seed,
        ..sim_config.clone()
    })?;
    let fc = FitConfig {
        seed: derive_seed(fit_config.seed, 0xB000 + r as u64),
        ..fit_config.clone()
    };
    let fit = fit_refined(&ds, &fc)?;
    let cf = cross_fit_residuals(&ds, folds, &fc)?;
    let info = information(cf.residuals.view(), ds.len())?;
    let theta: Vec<f64> = fit.state.theta.to_vec();
    let mut intervals = Vec::with_capacity(levels.len());
    for &level in levels {
        intervals.push(wald_ci(&theta, &info, level)?);
    }
    let covered = coverage_of(&intervals, &sim_config.theta_true);
    Ok(ReplicationRecord {
        replication: r,
        sim_seed,
        theta,
        standard_errors: info.standard_errors.to_vec(),
        censoring_fraction: ds.censoring_fraction(),
        intervals,
        covered,
        epochs_run: fit.epochs_run,
        refine_iterations: fit.refine_iterations,
    })
}

/// Sanity-mode study with the nuisance fixed at the true log-hazard
/// profile: only θ is estimated (by Newton refinement on the discretized
/// likelihood), and standard errors come from the θ-Hessian, i.e. the
/// parametric-MLE information with g known. Isolates θ-estimation and the
/// Wald machinery from network estimation error.
pub fn replicate_oracle(
    sim_config: &SimConfig,
    reps: usize,
    levels: &[f64],
    grid_size: Option<usize>,
) -> Result<ReplicationReport> {
    sim_config.validate()?;
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let outcomes: Vec<(usize, u64, Result<ReplicationRecord>)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sim_seed = derive_seed(sim_config.seed, 0xA000 + r as u64);
            let outcome = run_one_oracle(sim_config, r, sim_seed, levels, grid_size);
            (r, sim_seed, outcome)
        })
        .collect();
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for (r, sim_seed, outcome) in outcomes {
        match outcome {
            Ok(rec) => replications.push(rec),
            Err(e) => failures.push(ReplicationFailure {
                replication: r,
                sim_seed,
                message: e.to_string(),
            }),
        }
    }
    ReplicationReport::aggregate(
        sim_config.theta_true.clone(),
        levels.to_vec(),
        reps,
        replications,
        failures,
    )
}

fn run_one_oracle(
    sim_config: &SimConfig,
    r: usize,
    sim_seed: u64,
    levels: &[f64],
    grid_size: Option<usize>,
) -> Result<ReplicationRecord> {
    let ds = simulate(&SimConfig {
        seed: sim_seed,
        ..sim_config.clone()
    })?;
    let n = ds.len();
    let tau = ds.max_time();
    let m = grid_size.unwrap_or_else(|| n.clamp(1, 512));
    let grid = build_grid(&ds, m, tau)?;
    let rows = expand(&ds, &grid)?;
    let g_values: Vec<f64> = rows
        .iter()
        .map(|row| {
            true_log_hazard_profile(
                row.eval_time,
                &ds.record(row.subject).x,
                sim_config.base_rate,
            )
        })
        .collect();
    let p = sim_config.theta_true.len();
    let start = Array1::zeros(p);
    let (theta, iterations) =
        crate::fit::refine_theta_from_g_values(&rows, &g_values, &ds, &start)?;
    let collapsed = CollapsedRows::from_g_values(&rows, &g_values, &ds)?;
    let hessian = collapsed.hessian_at(&theta);
    let info = InformationEstimate::from_information(hessian, n, n)?;
    let theta: Vec<f64> = theta.to_vec();
    let mut intervals = Vec::with_capacity(levels.len());
    for &level in levels {
        intervals.push(wald_ci(&theta, &info, level)?);
    }
    let covered = coverage_of(&intervals, &sim_config.theta_true);
    Ok(ReplicationRecord {
        replication: r,
        sim_seed,
        theta,
        standard_errors: info.standard_errors.to_vec(),
        censoring_fraction: ds.censoring_fraction(),
        intervals,
        covered,
        epochs_run: 0,
        refine_iterations: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn nuisance_hand_values() {
        assert_eq!(f_nuisance(&[0.0, 0.0, 0.0]), 0.0);
        assert_relative_eq!(f_nuisance(&[1.0, 1.0, 1.0]), 1.9, epsilon = 1e-15);
        assert_relative_eq!(f_nuisance(&[-1.0, 1.0, 0.0]), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn event_time_closed_form_at_origin() {
        // x = 0, z = 0: a = 0.1, b = 0 → U = 10 ln(1 + E).
        let config = SimConfig::default();
        let u = (-1.0f64).exp(); // E = 1
        let t = sample_event_time(&[0.0; 3], &[0.0, 0.0], &[2.0, -1.0], &config, u);
        assert_relative_eq!(t, 10.0 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cumulative_hazard_round_trip() {
        let config = SimConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = open_unit(&mut rng);
            let t = sample_event_time(&x, &z, &config.theta_true, &config, u);
            let h = cumulative_hazard(t, &x, &z, &config.theta_true, &config);
            assert!(
                (h - (-u.ln())).abs() < 1e-10,
                "round trip failed: H = {h}, E = {}",
                -u.ln()
            );
        }
    }

    #[test]
    fn event_time_decreases_with_linear_predictor() {
        let config = SimConfig::default();
        let x = [0.3, -0.2, 0.5];
        let u = 0.42;
        let mut prev = f64::INFINITY;
        for b in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let t = sample_event_time(&x, &[b / 2.0, 0.0], &[2.0, -1.0], &config, u);
            assert!(t < prev, "event time not decreasing at b = {b}");
            prev = t;
        }
    }

    #[test]
    fn simulate_is_deterministic_and_truncated() {
        let config = SimConfig {
            n: 500,
            seed: 9,
            ..SimConfig::default()
        };
        let a = simulate(&config).unwrap();
        let b = simulate(&config).unwrap();
        assert_eq!(a.records(), b.records());
        for r in a.records() {
            assert!(r.time <= config.tau);
            assert!(r.time > 0.0);
        }
    }

    #[test]
    fn zero_censor_rate_gives_administrative_censoring_only() {
        let config = SimConfig {
            n: 4000,
            censor_rate: 0.0,
            seed: 5,
            ..SimConfig::default()
        };
        let ds = simulate(&config).unwrap();
        for r in ds.records() {
            if !r.event {
                assert_eq!(r.time, config.tau);
            }
        }
        // Some subjects should still reach the horizon.
        assert!(ds.records().iter().any(|r| !r.event));
    }

    #[test]
    fn kolmogorov_smirnov_at_fixed_covariates() {
        // Compare draws at fixed (x, z) with the analytic conditional CDF
        // F(t) = 1 - exp(-H(t)).
        let config = SimConfig::default();
        let x = [0.4, -0.6, 0.2];
        let z = [0.5, -0.5];
        let n = 20_000;
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let mut draws: Vec<f64> = (0..n)
            .map(|_| {
                sample_event_time(&x, &z, &config.theta_true, &config, open_unit(&mut rng))
            })
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, &t) in draws.iter().enumerate() {
            let f = 1.0 - (-cumulative_hazard(t, &x, &z, &config.theta_true, &config)).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((f - lo).abs()).max((f - hi).abs());
        }
        assert!(
            ks < 1.36 / (n as f64).sqrt(),
            "KS statistic {ks} above the 95% threshold"
        );
    }

    #[test]
    fn compensator_identity_event_count_matches_integrated_hazard() {
        // With the true model plugged in, the number of events matches the
        // summed cumulative hazard at the observed times within 3 SEs.
        let config = SimConfig {
            n: 5000,
            seed: 31,
            ..SimConfig::default()
        };
        let ds = simulate(&config).unwrap();
        let events = ds.num_events() as f64;
        let integrated: f64 = ds
            .records()
            .iter()
            .map(|r| cumulative_hazard(r.time, &r.x, &r.z, &config.theta_true, &config))
            .sum();
        assert!(
            (events - integrated).abs() < 3.0 * events.sqrt(),
            "events {events} vs integrated hazard {integrated}"
        );
    }

    #[test]
    fn censoring_fraction_near_thirty_percent() {
        let config = SimConfig {
            n: 20_000,
            seed: 3,
            ..SimConfig::default()
        };
        let ds = simulate(&config).unwrap();
        let frac = ds.censoring_fraction();
        assert!(
            (0.25..=0.35).contains(&frac),
            "censoring fraction {frac} outside [0.25, 0.35]"
        );
    }

    #[test]
    fn oracle_replicate_report_shape() {
        let config = SimConfig {
            n: 150,
            seed: 17,
            ..SimConfig::default()
        };
        let report = replicate_oracle(&config, 3, &[0.9, 0.95], Some(32)).unwrap();
        assert_eq!(report.replications.len(), 3);
        assert_eq!(report.summary.len(), 2);
        assert!(report.failures.is_empty());
        for s in &report.summary {
            assert!(s.empirical_sd.is_some());
            assert!(s.mean_standard_error > 0.0);
            assert_eq!(s.coverage.len(), 2);
        }
        let table = report.to_table();
        assert!(table.contains("theta1"));
        let csv = report.replication_csv();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn single_replication_reports_no_sd() {
        let config = SimConfig {
            n: 120,
            seed: 19,
            ..SimConfig::default()
        };
        let report = replicate_oracle(&config, 1, &[0.95], Some(16)).unwrap();
        assert!(report.summary[0].empirical_sd.is_none());
        assert!(report.to_table().contains('-'));
    }

    #[test]
    fn replicate_smoke_with_tiny_fit() {
        let sim = SimConfig {
            n: 120,
            seed: 23,
            ..SimConfig::default()
        };
        let fit = FitConfig {
            depth: 1,
            width: 4,
            max_epochs: 2,
            grid_size: Some(8),
            batch_size: 4096,
            ..FitConfig::default()
        };
        let report = replicate(&sim, &fit, 2, &[0.95], 3).unwrap();
        assert_eq!(report.replications.len() + report.failures.len(), 2);
        assert!(!report.replications.is_empty());
        // Different replications saw different data.
        if report.replications.len() == 2 {
            assert_ne!(
                report.replications[0].sim_seed,
                report.replications[1].sim_seed
            );
        }
    }

    #[test]
    fn replicate_is_thread_count_invariant() {
        let sim = SimConfig {
            n: 100,
            seed: 29,
            ..SimConfig::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| replicate_oracle(&sim, 4, &[0.9], Some(16)).unwrap())
        };
        let a = run(1);
        let b = run(2);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
