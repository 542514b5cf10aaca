//! Survival datasets, time grids, and the counting-process expansion that
//! turns the cumulative-hazard integral into a weighted sum.
//!
//! Each subject contributes one pseudo-observation per grid interval during
//! which it is at risk; the interval weight is the overlap of the at-risk
//! window with the interval, and the event indicator is attached to the
//! single interval containing the observed time.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// One subject: observed time, event indicator, nuisance covariates `x`,
/// and primary covariates `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// An immutable survival dataset with consistent covariate dimensions and
/// cached column matrices for the numerical routines.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<SurvivalRecord>,
    d: usize,
    p: usize,
    x_mat: Array2<f64>,
    z_mat: Array2<f64>,
}

impl Dataset {
    pub fn from_records(records: Vec<SurvivalRecord>) -> Result<Dataset> {
        if records.is_empty() {
            return Err(Error::Ingest {
                row: 0,
                message: "no records".to_string(),
            });
        }
        let d = records[0].x.len();
        let p = records[0].z.len();
        if p == 0 {
            return Err(Error::config("need at least one primary covariate z1"));
        }
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            if r.x.len() != d || r.z.len() != p {
                return Err(Error::Ingest {
                    row,
                    message: format!(
                        "covariate dimensions ({}, {}) differ from first record ({d}, {p})",
                        r.x.len(),
                        r.z.len()
                    ),
                });
            }
            if !r.time.is_finite() || r.time < 0.0 {
                return Err(Error::Ingest {
                    row,
                    message: format!("invalid time {}", r.time),
                });
            }
            if r.event && r.time == 0.0 {
                return Err(Error::Ingest {
                    row,
                    message: "event recorded at time 0".to_string(),
                });
            }
            if r.x.iter().chain(r.z.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Ingest {
                    row,
                    message: "non-finite covariate".to_string(),
                });
            }
        }
        let n = records.len();
        let mut x_mat = Array2::zeros((n, d));
        let mut z_mat = Array2::zeros((n, p));
        for (i, r) in records.iter().enumerate() {
            for (j, &v) in r.x.iter().enumerate() {
                x_mat[[i, j]] = v;
            }
            for (j, &v) in r.z.iter().enumerate() {
                z_mat[[i, j]] = v;
            }
        }
        Ok(Dataset {
            records,
            d,
            p,
            x_mat,
            z_mat,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Nuisance covariate dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Primary covariate dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn records(&self) -> &[SurvivalRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &SurvivalRecord {
        &self.records[i]
    }

    /// n × d nuisance covariate matrix.
    pub fn x_matrix(&self) -> &Array2<f64> {
        &self.x_mat
    }

    /// n × p primary covariate matrix.
    pub fn z_matrix(&self) -> &Array2<f64> {
        &self.z_mat
    }

    pub fn num_events(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    pub fn max_time(&self) -> f64 {
        self.records.iter().fold(0.0f64, |m, r| m.max(r.time))
    }

    /// Fraction of censored subjects.
    pub fn censoring_fraction(&self) -> f64 {
        1.0 - self.num_events() as f64 / self.len() as f64
    }
}

/// Reads a dataset from CSV with header `time,event,x1..xd,z1..zp`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let (d, p) = parse_header(&cols)?;

    let mut records = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        if rec.len() != 2 + d + p {
            return Err(Error::Ingest {
                row,
                message: format!("expected {} fields, got {}", 2 + d + p, rec.len()),
            });
        }
        let parse = |field: usize, name: &str| -> Result<f64> {
            rec[field].parse::<f64>().map_err(|_| Error::Ingest {
                row,
                message: format!("non-numeric value `{}` in column {name}", &rec[field]),
            })
        };
        let time = parse(0, "time")?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::Ingest {
                row,
                message: format!("negative or non-finite time {time}"),
            });
        }
        let event_val = parse(1, "event")?;
        let event = if event_val == 0.0 {
            false
        } else if event_val == 1.0 {
            true
        } else {
            return Err(Error::Ingest {
                row,
                message: format!("event must be 0 or 1, got {event_val}"),
            });
        };
        let mut x = Vec::with_capacity(d);
        for k in 0..d {
            x.push(parse(2 + k, &format!("x{}", k + 1))?);
        }
        let mut z = Vec::with_capacity(p);
        for k in 0..p {
            z.push(parse(2 + d + k, &format!("z{}", k + 1))?);
        }
        records.push(SurvivalRecord { time, event, x, z });
    }
    Dataset::from_records(records)
}

fn parse_header(cols: &[&str]) -> Result<(usize, usize)> {
    if cols.len() < 4 || cols[0] != "time" || cols[1] != "event" {
        return Err(Error::Ingest {
            row: 0,
            message: format!(
                "header must start with `time,event,x1..,z1..`, got `{}`",
                cols.join(",")
            ),
        });
    }
    let mut d = 0usize;
    let mut i = 2;
    while i < cols.len() && cols[i] == format!("x{}", d + 1) {
        d += 1;
        i += 1;
    }
    let mut p = 0usize;
    while i < cols.len() && cols[i] == format!("z{}", p + 1) {
        p += 1;
        i += 1;
    }
    if d == 0 || p == 0 || i != cols.len() {
        return Err(Error::Ingest {
            row: 0,
            message: format!(
                "header must be `time,event,x1..x{{d}},z1..z{{p}}`, got `{}`",
                cols.join(",")
            ),
        });
    }
    Ok((d, p))
}

/// Renders a dataset in the CSV schema `load_csv` reads. Floats use the
/// shortest round-trip representation, so write → read is lossless.
pub fn to_csv_string(dataset: &Dataset) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    out.push_str("time,event");
    for k in 1..=dataset.d() {
        let _ = write!(out, ",x{k}");
    }
    for k in 1..=dataset.p() {
        let _ = write!(out, ",z{k}");
    }
    out.push('\n');
    for r in dataset.records() {
        let _ = write!(out, "{},{}", r.time, u8::from(r.event));
        for v in &r.x {
            let _ = write!(out, ",{v}");
        }
        for v in &r.z {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes a dataset as CSV; see [`to_csv_string`].
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    out.write_all(to_csv_string(dataset).as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Quadrature grid `0 = t_0 < t_1 < … < t_m = τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    breakpoints: Vec<f64>,
    tau: f64,
}

impl TimeGrid {
    /// Validates and wraps an explicit breakpoint vector.
    pub fn new(breakpoints: Vec<f64>, tau: f64) -> Result<TimeGrid> {
        if !(tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {tau}")));
        }
        if breakpoints.len() < 2
            || breakpoints[0] != 0.0
            || *breakpoints.last().unwrap() != tau
        {
            return Err(Error::config(
                "breakpoints must start at 0 and end at tau".to_string(),
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config(
                "breakpoints must be strictly increasing".to_string(),
            ));
        }
        Ok(TimeGrid { breakpoints, tau })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_intervals(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// Largest interval length (the mesh size).
    pub fn mesh(&self) -> f64 {
        self.breakpoints
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0f64, f64::max)
    }
}

/// Builds the union of `{0, τ}`, an equally spaced grid with spacing
/// `τ/grid_size`, and every observed time, deduplicated by exact equality.
/// Having every observed time on the grid makes per-subject exposure sums
/// telescope exactly and pins each event to a unique interval.
pub fn build_grid(dataset: &Dataset, grid_size: usize, tau: f64) -> Result<TimeGrid> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    if grid_size == 0 {
        return Err(Error::config("grid_size must be at least 1".to_string()));
    }
    let mut points = Vec::with_capacity(grid_size + dataset.len() + 2);
    points.push(0.0);
    points.push(tau);
    for j in 1..grid_size {
        points.push(j as f64 * tau / grid_size as f64);
    }
    for r in dataset.records() {
        if r.time > tau {
            return Err(Error::config(format!(
                "observed time {} exceeds tau = {tau}; truncate the data first",
                r.time
            )));
        }
        if r.time > 0.0 {
            points.push(r.time);
        }
    }
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    TimeGrid::new(points, tau)
}

/// One pseudo-observation: subject `subject` at risk during grid interval
/// `interval` (1-based), evaluated at the interval's right endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedRow {
    pub subject: usize,
    /// 1-based interval index j, i.e. the interval (t_{j-1}, t_j].
    pub interval: usize,
    /// t_j, the time at which the log-hazard is evaluated.
    pub eval_time: f64,
    /// min(T_i, t_j) - t_{j-1}; the at-risk overlap with the interval.
    pub exposure: f64,
    /// True iff the subject's event falls in (t_{j-1}, t_j].
    pub delta: bool,
}

/// Counting-process expansion of a dataset over a grid. Rows are ordered by
/// subject, then interval. Zero-exposure, zero-event rows (a subject whose
/// observed time coincides with the interval's left endpoint) are dropped;
/// they contribute nothing to the likelihood.
pub fn expand(dataset: &Dataset, grid: &TimeGrid) -> Result<Vec<ExpandedRow>> {
    let bp = grid.breakpoints();
    let mut rows = Vec::new();
    for (i, rec) in dataset.records().iter().enumerate() {
        if rec.time > grid.tau() {
            return Err(Error::config(format!(
                "subject {i} has time {} beyond tau = {}; truncate the data first",
                rec.time,
                grid.tau()
            )));
        }
        let mut j = 1;
        while j < bp.len() && bp[j - 1] < rec.time {
            let exposure = rec.time.min(bp[j]) - bp[j - 1];
            let delta = rec.event && rec.time > bp[j - 1] && rec.time <= bp[j];
            if exposure > 0.0 || delta {
                rows.push(ExpandedRow {
                    subject: i,
                    interval: j,
                    eval_time: bp[j],
                    exposure,
                    delta,
                });
            }
            j += 1;
        }
    }
    Ok(rows)
}

/// Writes an expanded table as CSV (`subject,j,eval_time,exposure,delta`),
/// mainly for debugging.
pub fn write_expanded_csv(rows: &[ExpandedRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "subject,j,eval_time,exposure,delta")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.subject,
            r.interval,
            r.eval_time,
            r.exposure,
            u8::from(r.delta)
        )?;
    }
    out.flush()?;
    Ok(())
}
