//! Semiparametric inference on θ: the efficient information matrix is
//! estimated by regressing each Z coordinate on (T, X) over uncensored
//! subjects with cross-fitted networks, and standard errors follow from the
//! inverse information. Wald intervals use the standard normal quantile.
//!
//! The information target is E[Δ {Z - g*(T,X)}⊗2], where g* is the
//! event-weighted projection of Z onto functions of (T, X). Residuals of
//! censored subjects are zero rows, matching the Δ weight.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::linalg;
use crate::nn::{adam_step, AdamState, BackwardScratch, ForwardScratch, Gradients, MlpParams};

/// Condition-number ceiling beyond which the information matrix is treated
/// as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Estimated efficient information matrix with its inverse and the implied
/// per-coordinate standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "InformationDoc", into = "InformationDoc")]
pub struct InformationEstimate {
    pub info: Array2<f64>,
    pub info_inverse: Array2<f64>,
    /// sqrt(diag(info_inverse) / n).
    pub standard_errors: Array1<f64>,
    /// Number of nonzero residual rows (uncensored subjects).
    pub n_effective: usize,
    /// Subject count the estimate is scaled by.
    pub n: usize,
    /// 1-norm condition number of the information matrix.
    pub condition: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InformationDoc {
    info: Vec<Vec<f64>>,
    info_inverse: Vec<Vec<f64>>,
    standard_errors: Vec<f64>,
    n_effective: usize,
    n: usize,
    condition: f64,
}

impl From<InformationEstimate> for InformationDoc {
    fn from(e: InformationEstimate) -> Self {
        let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
        InformationDoc {
            info: rows(&e.info),
            info_inverse: rows(&e.info_inverse),
            standard_errors: e.standard_errors.to_vec(),
            n_effective: e.n_effective,
            n: e.n,
            condition: e.condition,
        }
    }
}

impl TryFrom<InformationDoc> for InformationEstimate {
    type Error = Error;

    fn try_from(doc: InformationDoc) -> Result<Self> {
        let to_mat = |rows: &[Vec<f64>]| -> Result<Array2<f64>> {
            let p = rows.len();
            let mut m = Array2::zeros((p, p));
            for (i, r) in rows.iter().enumerate() {
                if r.len() != p {
                    return Err(Error::shape("information matrix is not square".into()));
                }
                for (j, &v) in r.iter().enumerate() {
                    m[[i, j]] = v;
                }
            }
            Ok(m)
        };
        Ok(InformationEstimate {
            info: to_mat(&doc.info)?,
            info_inverse: to_mat(&doc.info_inverse)?,
            standard_errors: Array1::from_vec(doc.standard_errors),
            n_effective: doc.n_effective,
            n: doc.n,
            condition: doc.condition,
        })
    }
}

impl InformationEstimate {
    /// Builds the inverse and standard errors from an information matrix,
    /// guarding against singularity via the 1-norm condition number.
    pub fn from_information(info: Array2<f64>, n: usize, n_effective: usize) -> Result<Self> {
        let asym = linalg::asymmetry(info.view());
        if asym > 1e-12 {
            return Err(Error::Inference(format!(
                "information matrix asymmetry {asym:e} exceeds 1e-12"
            )));
        }
        let (inv, condition) = linalg::inverse_spd(info.view()).map_err(|e| {
            Error::Inference(format!("information matrix is singular: {e}"))
        })?;
        if condition > MAX_CONDITION {
            return Err(Error::Inference(format!(
                "information matrix condition number {condition:.3e} exceeds {MAX_CONDITION:e}"
            )));
        }
        let standard_errors =
            Array1::from_shape_fn(inv.nrows(), |j| (inv[[j, j]] / n as f64).sqrt());
        Ok(InformationEstimate {
            info,
            info_inverse: inv,
            standard_errors,
            n_effective,
            n,
            condition,
        })
    }
}

/// Cross-fitted projection networks: `networks[k][j]` predicts Z_j from
/// (T, X) and was trained with fold k held out.
#[derive(Debug, Clone)]
pub struct ProjectionModel {
    pub networks: Vec<Vec<MlpParams>>,
    /// Held-out fold of each subject.
    pub fold_of: Vec<usize>,
}

/// Squared-error regression of one Z coordinate on (T, X) over the
/// uncensored subjects in `subjects`, trained like the main model
/// (same architecture, ADAM, 33% early-stopping slice).
pub fn fit_projection(
    dataset: &Dataset,
    subjects: &[usize],
    coord: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<MlpParams> {
    config.validate()?;
    if coord >= dataset.p() {
        return Err(Error::shape(format!(
            "coordinate {coord} out of range for p = {}",
            dataset.p()
        )));
    }
    let uncensored: Vec<usize> = subjects
        .iter()
        .copied()
        .filter(|&i| dataset.record(i).event)
        .collect();
    if uncensored.len() < 2 {
        return Err(Error::Inference(format!(
            "projection for coordinate {coord} needs at least two uncensored subjects, \
             found {}",
            uncensored.len()
        )));
    }
    let d = dataset.d();
    let mut inputs = Array2::zeros((uncensored.len(), 1 + d));
    let mut targets = Array1::zeros(uncensored.len());
    for (r, &i) in uncensored.iter().enumerate() {
        let rec = dataset.record(i);
        inputs[[r, 0]] = rec.time;
        for k in 0..d {
            inputs[[r, 1 + k]] = rec.x[k];
        }
        targets[r] = rec.z[coord];
    }
    train_regressor(&inputs, &targets, config, seed)
}

/// Mini-batch ADAM on mean squared error with validation early stopping.
fn train_regressor(
    inputs: &Array2<f64>,
    targets: &Array1<f64>,
    config: &FitConfig,
    seed: u64,
) -> Result<MlpParams> {
    let n = inputs.nrows();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 3));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (val_idx, train_idx) = (val_idx.to_vec(), train_idx.to_vec());

    let widths = config.widths(inputs.ncols() - 1);
    let mut params = MlpParams::init(&widths, derive_seed(seed, 4))?;
    let mut theta_dummy = Array1::<f64>::zeros(0);
    let mut adam = AdamState::new(&params, 0, config.learning_rate);
    let capacity = config.batch_size.min(n).min(8192);
    let mut fwd = ForwardScratch::new(&params, capacity);
    let mut bwd = BackwardScratch::new(&params, capacity);
    let mut grads = Gradients::zeros_like(&params);
    let mut upstream = Array1::<f64>::zeros(capacity);

    // Validation MSE of the current parameters.
    let mse_of = |params: &MlpParams, fwd: &mut ForwardScratch, idx: &[usize]| -> f64 {
        let mut sse = 0.0;
        for chunk in idx.chunks(capacity) {
            {
                let mut inp = fwd.input_rows_mut(chunk.len());
                for (r, &i) in chunk.iter().enumerate() {
                    inp.row_mut(r).assign(&inputs.row(i));
                }
            }
            params.forward_batch(fwd, chunk.len());
            let out = fwd.outputs(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                sse += (out[r] - targets[i]).powi(2);
            }
        }
        sse / idx.len() as f64
    };

    let mut best = mse_of(&params, &mut fwd, &val_idx);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut order: Vec<usize> = train_idx.clone();
    let batch = config.batch_size.min(order.len());
    let inv_n = 1.0 / order.len() as f64;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk_idx in order.chunks(batch) {
            grads.fill_zero();
            for sub in chunk_idx.chunks(capacity) {
                {
                    let mut inp = fwd.input_rows_mut(sub.len());
                    for (r, &i) in sub.iter().enumerate() {
                        inp.row_mut(r).assign(&inputs.row(i));
                    }
                }
                params.forward_batch(&mut fwd, sub.len());
                let out = fwd.outputs(sub.len());
                for (r, &i) in sub.iter().enumerate() {
                    upstream[r] = 2.0 * (out[r] - targets[i]) * inv_n;
                }
                params.backward_batch(
                    &fwd,
                    &mut bwd,
                    upstream.slice(ndarray::s![..sub.len()]),
                    &mut grads,
                    sub.len(),
                );
            }
            adam_step(
                &mut params,
                &mut theta_dummy,
                &grads,
                Array1::zeros(0).view(),
                &mut adam,
            )?;
        }
        let val = mse_of(&params, &mut fwd, &val_idx);
        if val < best {
            best = val;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok(best_params)
}

/// Deterministic fold assignment by hashing the subject index with the seed.
fn assign_folds(n: usize, k_folds: usize, seed: u64) -> Vec<usize> {
    (0..n)
        .map(|i| (derive_seed(seed ^ 0x0f01d_5eed, i as u64) % k_folds as u64) as usize)
        .collect()
}

/// Output of [`cross_fit_residuals`]: the n × p residual matrix (zero rows
/// for censored subjects) and the fitted fold structure.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub residuals: Array2<f64>,
    pub model: ProjectionModel,
}

/// Cross-fitted residuals R_i = Δ_i (Z_i - ĝ*(T_i, X_i)): for each fold and
/// coordinate, a projection network trained on the other folds' uncensored
/// subjects predicts on the held-out fold.
pub fn cross_fit_residuals(
    dataset: &Dataset,
    k_folds: usize,
    config: &FitConfig,
) -> Result<CrossFit> {
    config.validate()?;
    let n = dataset.len();
    if k_folds < 2 {
        return Err(Error::Inference("need at least 2 folds".to_string()));
    }
    if k_folds > n {
        return Err(Error::Inference(format!(
            "{k_folds} folds but only {n} subjects"
        )));
    }
    let fold_of = assign_folds(n, k_folds, config.seed);
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k_folds];
    for (i, &f) in fold_of.iter().enumerate() {
        fold_members[f].push(i);
    }
    if fold_members.iter().any(|m| m.is_empty()) {
        return Err(Error::Inference(
            "a fold is empty; reduce the fold count".to_string(),
        ));
    }
    let complements: Vec<Vec<usize>> = (0..k_folds)
        .map(|k| (0..n).filter(|i| fold_of[*i] != k).collect())
        .collect();
    for (k, c) in complements.iter().enumerate() {
        let unc = c.iter().filter(|&&i| dataset.record(i).event).count();
        if unc < 2 {
            return Err(Error::Inference(format!(
                "fold {k} has only {unc} out-of-fold uncensored subjects"
            )));
        }
    }

    let p = dataset.p();
    let jobs: Vec<(usize, usize)> = (0..k_folds)
        .flat_map(|k| (0..p).map(move |j| (k, j)))
        .collect();
    let fitted: Vec<Result<MlpParams>> = jobs
        .par_iter()
        .map(|&(k, j)| {
            fit_projection(
                dataset,
                &complements[k],
                j,
                config,
                derive_seed(config.seed, (1000 + k * p + j) as u64),
            )
        })
        .collect();
    let mut networks: Vec<Vec<MlpParams>> = vec![Vec::new(); k_folds];
    for ((k, _), params) in jobs.into_iter().zip(fitted) {
        networks[k].push(params?);
    }

    let mut residuals = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        let rec = dataset.record(i);
        if !rec.event {
            continue;
        }
        let mut input = Vec::with_capacity(1 + dataset.d());
        input.push(rec.time);
        input.extend_from_slice(&rec.x);
        for j in 0..p {
            let (pred, _) = networks[fold_of[i]][j].forward(&input)?;
            residuals[[i, j]] = rec.z[j] - pred;
        }
    }
    Ok(CrossFit {
        residuals,
        model: ProjectionModel { networks, fold_of },
    })
}

/// Î = RᵀR / n from the residual matrix, with inverse and standard errors.
pub fn information(residuals: ArrayView2<f64>, n: usize) -> Result<InformationEstimate> {
    if residuals.nrows() != n {
        return Err(Error::shape(format!(
            "residual matrix has {} rows, expected n = {n}",
            residuals.nrows()
        )));
    }
    let p = residuals.ncols();
    let mut info = Array2::<f64>::zeros((p, p));
    ndarray::linalg::general_mat_mul(
        1.0 / n as f64,
        &residuals.t(),
        &residuals,
        0.0,
        &mut info.view_mut(),
    );
    for i in 0..p {
        for j in 0..i {
            let m = 0.5 * (info[[i, j]] + info[[j, i]]);
            info[[i, j]] = m;
            info[[j, i]] = m;
        }
    }
    let n_effective = residuals
        .rows()
        .into_iter()
        .filter(|r| r.iter().any(|&v| v != 0.0))
        .count();
    InformationEstimate::from_information(info, n, n_effective)
}

/// Standard normal quantile Φ⁻¹(p), rational approximation (AS 241,
/// PPND16), absolute accuracy far below 1e-8 on (0, 1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config(format!(
            "quantile probability must lie in (0, 1), got {p}"
        )));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_854_6e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return Ok(num / den);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = (((((1.421_511_758_316_445_9e-15 * r + 1.846_318_317_510_054_7e-6) * r
            + 7.868_691_311_456_132_6e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358_1e-1)
            * r
            + 5.998_322_065_558_879_4e-1)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -val } else { val })
}

/// Symmetric Wald intervals θ_j ± z_{(1+level)/2} · SE_j.
pub fn wald_ci(
    theta: &[f64],
    est: &InformationEstimate,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if theta.len() != est.standard_errors.len() {
        return Err(Error::shape(format!(
            "theta length {} does not match {} standard errors",
            theta.len(),
            est.standard_errors.len()
        )));
    }
    let z = normal_quantile(0.5 * (1.0 + level))?;
    Ok(theta
        .iter()
        .zip(est.standard_errors.iter())
        .map(|(&t, &se)| (t - z * se, t + z * se))
        .collect())
}
