//! Cox proportional-hazards fit on the pooled covariates (X, Z) via
//! Newton–Raphson on the log partial likelihood with Breslow tie handling.
//! Used only to warm-start the linear coefficients of the main model.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Result of a Cox partial-likelihood fit over the pooled (X, Z) columns.
#[derive(Debug, Clone)]
pub struct CoxFit {
    /// Coefficients ordered as (x1..xd, z1..zp).
    pub coefficients: Array1<f64>,
    /// Observed partial-likelihood information matrix at the estimate
    /// (sum over events, unnormalized). Its inverse estimates Var(β̂).
    pub information: Array2<f64>,
    /// Newton iterations performed.
    pub iterations: usize,
    /// Euclidean norm of the score at the returned estimate.
    pub gradient_norm: f64,
}

impl CoxFit {
    /// Model-based standard errors sqrt(diag(I⁻¹)).
    pub fn standard_errors(&self) -> Result<Array1<f64>> {
        let (inv, _) = linalg::inverse_spd(self.information.view())?;
        Ok(Array1::from_shape_fn(inv.nrows(), |j| inv[[j, j]].sqrt()))
    }
}

/// Pooled covariate matrix (X columns first, then Z) and a time-descending
/// traversal order with tie groups.
struct CoxData {
    w: Array2<f64>,
    events: Vec<bool>,
    /// Subject indices sorted by descending time.
    order: Vec<usize>,
    times: Vec<f64>,
}

impl CoxData {
    fn build(dataset: &Dataset) -> Result<CoxData> {
        let n = dataset.len();
        let q = dataset.d() + dataset.p();
        let mut w = Array2::zeros((n, q));
        for i in 0..n {
            let r = dataset.record(i);
            for (k, &v) in r.x.iter().enumerate() {
                w[[i, k]] = v;
            }
            for (k, &v) in r.z.iter().enumerate() {
                w[[i, dataset.d() + k]] = v;
            }
        }
        for k in 0..q {
            let col = w.column(k);
            let (min, max) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if min == max {
                return Err(Error::Estimation(format!(
                    "covariate column {k} is constant; drop it before fitting"
                )));
            }
        }
        if dataset.num_events() == 0 {
            return Err(Error::Estimation(
                "no events in the dataset; the partial likelihood is flat".to_string(),
            ));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            dataset
                .record(b)
                .time
                .partial_cmp(&dataset.record(a).time)
                .unwrap()
        });
        Ok(CoxData {
            w,
            events: dataset.records().iter().map(|r| r.event).collect(),
            order,
            times: dataset.records().iter().map(|r| r.time).collect(),
        })
    }

    fn q(&self) -> usize {
        self.w.ncols()
    }

    /// Log partial likelihood, score, and information at β (Breslow ties).
    /// Scans subjects by descending time, growing the risk-set accumulators
    /// before processing the events tied at each distinct time.
    fn evaluate(&self, beta: ArrayView1<f64>, with_derivs: bool) -> CoxEval {
        let q = self.q();
        let mut s0 = 0.0f64;
        let mut s1 = Array1::<f64>::zeros(q);
        let mut s2 = Array2::<f64>::zeros((q, q));
        let mut loglik = 0.0;
        let mut score = Array1::<f64>::zeros(q);
        let mut info = Array2::<f64>::zeros((q, q));

        let mut pos = 0;
        while pos < self.order.len() {
            let t = self.times[self.order[pos]];
            let mut end = pos;
            while end < self.order.len() && self.times[self.order[end]] == t {
                end += 1;
            }
            // Enter the whole tie group into the risk set first.
            for &i in &self.order[pos..end] {
                let wi = self.w.row(i);
                let e = wi.dot(&beta).exp();
                s0 += e;
                for k in 0..q {
                    s1[k] += e * wi[k];
                }
                if with_derivs {
                    for a in 0..q {
                        for b in 0..=a {
                            s2[[a, b]] += e * wi[a] * wi[b];
                        }
                    }
                }
            }
            for &i in &self.order[pos..end] {
                if !self.events[i] {
                    continue;
                }
                let wi = self.w.row(i);
                loglik += wi.dot(&beta) - s0.ln();
                if with_derivs {
                    for k in 0..q {
                        score[k] += wi[k] - s1[k] / s0;
                    }
                    for a in 0..q {
                        for b in 0..=a {
                            let v = s2[[a, b]] / s0 - (s1[a] / s0) * (s1[b] / s0);
                            info[[a, b]] += v;
                        }
                    }
                }
            }
            pos = end;
        }
        for a in 0..q {
            for b in 0..a {
                info[[b, a]] = info[[a, b]];
            }
        }
        CoxEval {
            loglik,
            score,
            info,
        }
    }
}

struct CoxEval {
    loglik: f64,
    score: Array1<f64>,
    info: Array2<f64>,
}

const MAX_ITERS: usize = 50;
const GRAD_TOL: f64 = 1e-8;

/// Maximizes the Cox log partial likelihood over the pooled (X, Z)
/// covariates. Newton–Raphson with step-halving on non-increase; converges
/// when the score norm drops below 1e-8.
pub fn cox_fit(dataset: &Dataset) -> Result<CoxFit> {
    let data = CoxData::build(dataset)?;
    let q = data.q();
    let mut beta = Array1::<f64>::zeros(q);
    let mut eval = data.evaluate(beta.view(), true);

    for iter in 1..=MAX_ITERS {
        let grad_norm = eval.score.dot(&eval.score).sqrt();
        if grad_norm < GRAD_TOL {
            return Ok(CoxFit {
                coefficients: beta,
                information: eval.info,
                iterations: iter - 1,
                gradient_norm: grad_norm,
            });
        }
        let step = linalg::solve_spd(eval.info.view(), eval.score.view()).map_err(|_| {
            Error::Estimation(
                "singular partial-likelihood information; covariates may be collinear"
                    .to_string(),
            )
        })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &(lambda * &step);
            let trial = data.evaluate(candidate.view(), true);
            if trial.loglik.is_finite() && trial.loglik >= eval.loglik {
                beta = candidate;
                eval = trial;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::Estimation(format!(
                "partial-likelihood step failed to increase the objective at iteration {iter}"
            )));
        }
    }
    let grad_norm = eval.score.dot(&eval.score).sqrt();
    if grad_norm < GRAD_TOL {
        Ok(CoxFit {
            coefficients: beta,
            information: eval.info,
            iterations: MAX_ITERS,
            gradient_norm: grad_norm,
        })
    } else {
        Err(Error::Estimation(format!(
            "Cox fit did not converge in {MAX_ITERS} iterations (score norm {grad_norm:e})"
        )))
    }
}
