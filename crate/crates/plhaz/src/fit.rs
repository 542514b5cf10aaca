//! End-to-end estimation pipeline: Cox-initialized linear branch, mini-batch
//! ADAM over the expanded rows with validation-based early stopping, and
//! post-hoc Newton refinement of θ with the network frozen.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cox::cox_fit;
use crate::data::{build_grid, expand, Dataset, ExpandedRow};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::likelihood::{
    eval_grad_indexed, eval_loss, eval_theta_hessian, EvalWorkspace, ModelState, RowSet,
    CHI_OVERFLOW,
};
use crate::linalg;
use crate::nn::{adam_step, AdamState, Gradients, MlpParams};

/// Warn when the fitted log-hazard grows past this magnitude; the model is
/// intended for bounded nuisance functions and anything this large usually
/// means divergence.
const G_MONITOR_BOUND: f64 = 50.0;

/// Training hyperparameters.
///
/// The architecture and optimizer defaults (5 hidden layers of width 20,
/// learning rate 1e-3, patience 35, 33% validation) follow the configuration
/// selected by cross-validation for this model class. `grid_size = None`
/// resolves to `min(n, 512)` equally spaced points (the grid always also
/// contains every observed time). `batch_size` is capped at the expansion
/// size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Number of hidden layers.
    pub depth: usize,
    /// Units per hidden layer.
    pub width: usize,
    pub learning_rate: f64,
    /// Expanded rows per ADAM step.
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of subjects reserved for early stopping.
    pub val_fraction: f64,
    /// Equally spaced grid points; `None` = min(n, 512).
    pub grid_size: Option<usize>,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            depth: 5,
            width: 20,
            learning_rate: 1e-3,
            batch_size: 16_384,
            patience: 35,
            val_fraction: 0.33,
            grid_size: None,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::config("depth and width must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie strictly in (0, 1)"));
        }
        if self.grid_size == Some(0) {
            return Err(Error::config("grid_size must be at least 1"));
        }
        Ok(())
    }

    pub fn effective_grid_size(&self, n: usize) -> usize {
        self.grid_size.unwrap_or_else(|| n.clamp(1, 512))
    }

    /// Width vector for the nuisance network given the covariate dimension.
    pub fn widths(&self, d: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.depth + 2);
        w.push(1 + d);
        w.extend(std::iter::repeat(self.width).take(self.depth));
        w.push(1);
        w
    }
}

/// Train/validation losses for one epoch. The train loss is the running
/// sum of batch losses over the epoch (parameters move between batches).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Output of [`train`] (and, with refinement applied, of [`fit_refined`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Best-validation network weights; θ is refined iff `refine_iterations > 0`.
    pub state: ModelState,
    pub train_history: Vec<EpochStats>,
    pub epochs_run: usize,
    /// Cox warm start (the Z block of the pooled fit).
    pub theta_initial: Vec<f64>,
    /// θ at the best-validation snapshot, before any refinement.
    pub theta_unrefined: Vec<f64>,
    pub refine_iterations: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Splits subjects into train/validation index sets, retrying with shifted
/// seeds until both sides contain at least one event.
fn split_subjects(
    dataset: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = dataset.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    for attempt in 0..10u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 100 + attempt));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let (val, train) = idx.split_at(n_val);
        let has_event = |s: &[usize]| s.iter().any(|&i| dataset.record(i).event);
        if has_event(val) && has_event(train) {
            let mut train = train.to_vec();
            let mut val = val.to_vec();
            train.sort_unstable();
            val.sort_unstable();
            return Ok((train, val));
        }
    }
    Err(Error::Training(
        "could not split subjects with at least one event on each side in 10 attempts"
            .to_string(),
    ))
}

/// Trains the network and θ jointly by mini-batch ADAM on the discretized
/// likelihood, with subject-level early stopping. Returns the
/// best-validation snapshot; θ is *not* refined here (see [`fit_refined`]).
pub fn train(dataset: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Training(
            "training requires at least two subjects".to_string(),
        ));
    }
    let (train_subjects, _val_subjects) =
        split_subjects(dataset, config.val_fraction, config.seed)?;
    let mut in_train = vec![false; dataset.len()];
    for &i in &train_subjects {
        in_train[i] = true;
    }
    let n_train = train_subjects.len();
    let n_val = dataset.len() - n_train;

    // Grid over the full dataset: deterministic plumbing, and it guarantees
    // exposure conservation on the validation subjects too.
    let tau = dataset.max_time();
    if !(tau > 0.0) {
        return Err(Error::Training(
            "all observed times are zero; nothing to fit".to_string(),
        ));
    }
    let grid = build_grid(dataset, config.effective_grid_size(dataset.len()), tau)?;
    let rows = expand(dataset, &grid)?;
    let (train_rows, val_rows): (Vec<ExpandedRow>, Vec<ExpandedRow>) =
        rows.into_iter().partition(|r| in_train[r.subject]);
    let train_set = RowSet::new(&train_rows, dataset, n_train);
    let val_set = RowSet::new(&val_rows, dataset, n_val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Training(
            "a split side has no at-risk exposure; data may be degenerate".to_string(),
        ));
    }

    let cox = cox_fit(dataset)?;
    let theta_initial = cox
        .coefficients
        .slice(ndarray::s![dataset.d()..])
        .to_owned();
    let mut params = MlpParams::init(&config.widths(dataset.d()), derive_seed(config.seed, 1))?;
    let mut theta = theta_initial.clone();
    let mut adam = AdamState::new(&params, dataset.p(), config.learning_rate);
    let mut ws = EvalWorkspace::new(&params, dataset.p());
    let mut grads = Gradients::zeros_like(&params);
    let mut theta_grad = Array1::zeros(dataset.p());

    let mut best_params = params.clone();
    let mut best_theta = theta.clone();
    let mut best_val = eval_loss(&params, theta.view(), &val_set, &mut ws)?.neg_loglik;
    let mut best_epoch = 0usize;
    let mut history = Vec::new();
    let mut warned_unbounded = false;

    let mut order: Vec<u32> = (0..train_set.len() as u32).collect();
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 2));
    let batch = config.batch_size.min(train_set.len());

    let mut epochs_run = 0usize;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(batch) {
            grads.fill_zero();
            theta_grad.fill(0.0);
            train_loss += eval_grad_indexed(
                &params,
                theta.view(),
                &train_set,
                chunk,
                &mut ws,
                &mut grads,
                &mut theta_grad,
            )?;
            adam_step(&mut params, &mut theta, &grads, theta_grad.view(), &mut adam)?;
        }
        let val_report = eval_loss(&params, theta.view(), &val_set, &mut ws)?;
        if !warned_unbounded && val_report.max_abs_g > G_MONITOR_BOUND {
            warned_unbounded = true;
            log::warn!(
                "max |g| = {:.1} exceeded the monitoring bound {G_MONITOR_BOUND}; \
                 the nuisance fit may be diverging",
                val_report.max_abs_g
            );
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss: val_report.neg_loglik,
        });
        epochs_run = epoch;
        if val_report.neg_loglik < best_val {
            best_val = val_report.neg_loglik;
            best_epoch = epoch;
            best_params = params.clone();
            best_theta = theta.clone();
        }
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    Ok(FitResult {
        state: ModelState::new(best_params, best_theta.clone())?,
        train_history: history,
        epochs_run,
        theta_initial: theta_initial.to_vec(),
        theta_unrefined: best_theta.to_vec(),
        refine_iterations: 0,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Per-subject sufficient statistics for θ-only optimization with g frozen:
/// neg_loglik(θ) = -(1/n) Σ_i [ B_i + D_i θᵀz_i - A_i exp(θᵀz_i) ].
pub(crate) struct CollapsedRows {
    /// A_i = Σ_j w_ij exp(g_ij).
    pub a: Array1<f64>,
    /// D_i = Σ_j δ_ij ∈ {0, 1}.
    pub d: Array1<f64>,
    /// B_i = Σ_j δ_ij g_ij (constant in θ, kept so losses are comparable).
    pub b: Array1<f64>,
    /// n × p primary covariates.
    pub z: Array2<f64>,
    pub n_norm: f64,
}

impl CollapsedRows {
    /// Collapses expanded rows given per-row values of g.
    pub fn from_g_values(
        rows: &[ExpandedRow],
        g_values: &[f64],
        dataset: &Dataset,
    ) -> Result<CollapsedRows> {
        if rows.len() != g_values.len() {
            return Err(Error::shape(format!(
                "{} rows but {} g values",
                rows.len(),
                g_values.len()
            )));
        }
        let n = dataset.len();
        let mut a = Array1::<f64>::zeros(n);
        let mut d = Array1::<f64>::zeros(n);
        let mut b = Array1::<f64>::zeros(n);
        for (row, &g) in rows.iter().zip(g_values) {
            if !(g <= CHI_OVERFLOW) {
                return Err(Error::numerical(format!(
                    "log-hazard value {g:.3} exceeds {CHI_OVERFLOW} for subject {}",
                    row.subject
                )));
            }
            a[row.subject] += row.exposure * g.exp();
            if row.delta {
                d[row.subject] += 1.0;
                b[row.subject] += g;
            }
        }
        Ok(CollapsedRows {
            a,
            d,
            b,
            z: dataset.z_matrix().clone(),
            n_norm: n as f64,
        })
    }

    pub fn neg_loglik(&self, theta: &Array1<f64>) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.z.nrows() {
            let zt = self.z.row(i).dot(theta);
            if self.a[i] > 0.0 && zt + self.a[i].ln() > CHI_OVERFLOW {
                return Err(Error::numerical(format!(
                    "cumulative hazard overflows for subject {i} (θᵀz = {zt:.3})"
                )));
            }
            total += self.b[i] + self.d[i] * zt - self.a[i] * zt.exp();
        }
        Ok(-total / self.n_norm)
    }

    fn gradient(&self, theta: &Array1<f64>) -> Array1<f64> {
        let p = theta.len();
        let mut grad = Array1::<f64>::zeros(p);
        for i in 0..self.z.nrows() {
            let s = self.d[i] - self.a[i] * self.z.row(i).dot(theta).exp();
            for k in 0..p {
                grad[k] -= s * self.z[[i, k]];
            }
        }
        grad / self.n_norm
    }

    pub(crate) fn hessian_at(&self, theta: &Array1<f64>) -> Array2<f64> {
        let p = theta.len();
        let mut h = Array2::<f64>::zeros((p, p));
        for i in 0..self.z.nrows() {
            let w = self.a[i] * self.z.row(i).dot(theta).exp();
            for a in 0..p {
                for b in 0..=a {
                    h[[a, b]] += w * self.z[[i, a]] * self.z[[i, b]];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[[b, a]] = h[[a, b]];
            }
        }
        h / self.n_norm
    }
}

const REFINE_GRAD_TOL: f64 = 1e-10;
const REFINE_MAX_NEWTON: usize = 100;
const REFINE_MAX_FALLBACK: usize = 1000;

/// Newton iterations on neg_loglik in θ with step-halving; the objective
/// never increases. Falls back to backtracking gradient descent when the
/// Hessian is numerically singular.
fn optimize_theta(collapsed: &CollapsedRows, start: &Array1<f64>) -> Result<(Array1<f64>, usize)> {
    let mut theta = start.clone();
    let mut value = collapsed.neg_loglik(&theta)?;
    for iter in 0..REFINE_MAX_NEWTON {
        let grad = collapsed.gradient(&theta);
        if grad.dot(&grad).sqrt() < REFINE_GRAD_TOL {
            return Ok((theta, iter));
        }
        let hess = collapsed.hessian_at(&theta);
        let direction = match linalg::solve_spd(hess.view(), grad.view()) {
            Ok(step) => step,
            Err(_) => return fallback_descent(collapsed, &theta, value, iter),
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &theta - &(lambda * &direction);
            if let Ok(v) = collapsed.neg_loglik(&candidate) {
                if v <= value {
                    theta = candidate;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            // The Newton direction stopped making progress; by concavity
            // this only happens at numerical convergence.
            return Ok((theta, iter + 1));
        }
    }
    Ok((theta, REFINE_MAX_NEWTON))
}

fn fallback_descent(
    collapsed: &CollapsedRows,
    start: &Array1<f64>,
    start_value: f64,
    newton_iters: usize,
) -> Result<(Array1<f64>, usize)> {
    log::warn!("θ-Hessian numerically singular; falling back to gradient descent");
    let mut theta = start.clone();
    let mut value = start_value;
    for iter in 0..REFINE_MAX_FALLBACK {
        let grad = collapsed.gradient(&theta);
        if grad.dot(&grad).sqrt() < REFINE_GRAD_TOL {
            return Ok((theta, newton_iters + iter));
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &theta - &(lambda * &grad);
            if let Ok(v) = collapsed.neg_loglik(&candidate) {
                if v < value {
                    theta = candidate;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::Inference(
                "θ refinement failed: Hessian singular and gradient descent stalled"
                    .to_string(),
            ));
        }
    }
    Err(Error::Inference(
        "θ refinement failed to converge under the gradient-descent fallback".to_string(),
    ))
}

/// Maximizes the discretized likelihood over θ only, holding the network
/// frozen. Returns the refined state and the number of iterations used.
pub fn refine_theta(
    state: &ModelState,
    rows: &[ExpandedRow],
    dataset: &Dataset,
) -> Result<(ModelState, usize)> {
    state.check_dims(dataset)?;
    let rowset = RowSet::new(rows, dataset, dataset.len());
    let mut ws = EvalWorkspace::new(&state.g_params, dataset.p());
    let g_values = crate::likelihood::eval_g_values(&state.g_params, &rowset, &mut ws)?;
    let collapsed = CollapsedRows::from_g_values(rows, g_values.as_slice().unwrap(), dataset)?;
    let (theta, iterations) = optimize_theta(&collapsed, &state.theta)?;
    Ok((ModelState::new(state.g_params.clone(), theta)?, iterations))
}

pub(crate) fn refine_theta_from_g_values(
    rows: &[ExpandedRow],
    g_values: &[f64],
    dataset: &Dataset,
    start: &Array1<f64>,
) -> Result<(Array1<f64>, usize)> {
    let collapsed = CollapsedRows::from_g_values(rows, g_values, dataset)?;
    optimize_theta(&collapsed, start)
}

/// [`train`] followed by θ refinement on the full-dataset expansion (same
/// grid policy as training). This is the estimator the CLI and the
/// replication harness use.
pub fn fit_refined(dataset: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let mut result = train(dataset, config)?;
    let tau = dataset.max_time();
    let grid = build_grid(dataset, config.effective_grid_size(dataset.len()), tau)?;
    let rows = expand(dataset, &grid)?;
    let (state, iterations) = refine_theta(&result.state, &rows, dataset)?;
    result.state = state;
    result.refine_iterations = iterations;
    Ok(result)
}

/// θ-Hessian of the state's neg_loglik on the given rows; used both by
/// refinement diagnostics and by the known-nuisance study mode.
pub(crate) fn hessian_on_rows(
    state: &ModelState,
    rows: &[ExpandedRow],
    dataset: &Dataset,
) -> Result<Array2<f64>> {
    let rowset = RowSet::new(rows, dataset, dataset.len());
    let mut ws = EvalWorkspace::new(&state.g_params, dataset.p());
    eval_theta_hessian(&state.g_params, state.theta.view(), &rowset, &mut ws)
}
