//! Discretized negative log-likelihood of the partially linear hazard model,
//! with exact gradients for the network parameters and θ and the θ-Hessian
//! used by Newton refinement.
//!
//! For expanded rows (subject i, interval j) with exposure w_ij, event flag
//! δ_ij, and linear predictor χ_ij = g(t_j, X_i) + θᵀZ_i, the per-subject
//! normalized loss is
//!
//! `neg_loglik = -(1/n) Σ_ij [ δ_ij χ_ij - w_ij exp(χ_ij) ]`.
//!
//! All evaluation is chunked through reusable scratch buffers; the same
//! kernels back the public one-shot operations and the training loops.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExpandedRow, TimeGrid};
use crate::error::{Error, Result};
use crate::nn::{BackwardScratch, ForwardScratch, Gradients, MlpParams};

/// Hard ceiling on the linear predictor before `exp` would overflow.
/// Exceeding it aborts the computation instead of silently clamping.
pub const CHI_OVERFLOW: f64 = 700.0;

/// Chunk size for batched evaluation. Large enough to keep the matrix
/// kernels efficient, small enough that scratch stays cache-friendly.
pub(crate) const EVAL_CHUNK: usize = 8192;

/// Network nuisance component plus linear coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelStateDoc", into = "ModelStateDoc")]
pub struct ModelState {
    pub g_params: MlpParams,
    pub theta: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelStateDoc {
    g_params: MlpParams,
    theta: Vec<f64>,
}

impl From<ModelState> for ModelStateDoc {
    fn from(s: ModelState) -> Self {
        ModelStateDoc {
            g_params: s.g_params,
            theta: s.theta.to_vec(),
        }
    }
}

impl TryFrom<ModelStateDoc> for ModelState {
    type Error = Error;

    fn try_from(doc: ModelStateDoc) -> Result<Self> {
        ModelState::new(doc.g_params, Array1::from_vec(doc.theta))
    }
}

impl ModelState {
    pub fn new(g_params: MlpParams, theta: Array1<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite theta".to_string()));
        }
        Ok(ModelState { g_params, theta })
    }

    /// Checks that the state is dimensioned for the given dataset.
    pub fn check_dims(&self, dataset: &Dataset) -> Result<()> {
        if self.g_params.input_dim() != 1 + dataset.d() {
            return Err(Error::shape(format!(
                "network input width {} does not match 1 + d = {}",
                self.g_params.input_dim(),
                1 + dataset.d()
            )));
        }
        if self.theta.len() != dataset.p() {
            return Err(Error::shape(format!(
                "theta length {} does not match p = {}",
                self.theta.len(),
                dataset.p()
            )));
        }
        Ok(())
    }
}

/// Loss value with its two summands kept separate and the largest |g| seen,
/// which training monitors as a boundedness diagnostic.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    /// -(event_term - exposure_term) / n.
    pub neg_loglik: f64,
    /// Σ δ_ij χ_ij (unnormalized).
    pub event_term: f64,
    /// Σ w_ij exp(χ_ij) (unnormalized).
    pub exposure_term: f64,
    /// max |g(t_j, X_i)| over the rows.
    pub max_abs_g: f64,
}

/// Column-major view of an expansion, ready for batched evaluation.
/// `n_norm` is the subject count used for 1/n normalization, which for a
/// split fit is the number of subjects in that split, not the row count.
pub(crate) struct RowSet {
    pub inputs: Array2<f64>,
    pub z: Array2<f64>,
    pub exposure: Array1<f64>,
    pub delta: Array1<f64>,
    pub subject: Vec<u32>,
    pub interval: Vec<u32>,
    pub n_norm: f64,
}

impl RowSet {
    pub fn new(rows: &[ExpandedRow], dataset: &Dataset, n_subjects: usize) -> RowSet {
        let m = rows.len();
        let d = dataset.d();
        let p = dataset.p();
        let mut inputs = Array2::zeros((m, 1 + d));
        let mut z = Array2::zeros((m, p));
        let mut exposure = Array1::zeros(m);
        let mut delta = Array1::zeros(m);
        let mut subject = Vec::with_capacity(m);
        let mut interval = Vec::with_capacity(m);
        let x_mat = dataset.x_matrix();
        let z_mat = dataset.z_matrix();
        for (r, row) in rows.iter().enumerate() {
            inputs[[r, 0]] = row.eval_time;
            for k in 0..d {
                inputs[[r, 1 + k]] = x_mat[[row.subject, k]];
            }
            for k in 0..p {
                z[[r, k]] = z_mat[[row.subject, k]];
            }
            exposure[r] = row.exposure;
            delta[r] = f64::from(row.delta);
            subject.push(row.subject as u32);
            interval.push(row.interval as u32);
        }
        RowSet {
            inputs,
            z,
            exposure,
            delta,
            subject,
            interval,
            n_norm: n_subjects as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.subject.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject.is_empty()
    }
}

/// Reusable buffers for chunked likelihood evaluation.
pub(crate) struct EvalWorkspace {
    fwd: ForwardScratch,
    bwd: BackwardScratch,
    z: Array2<f64>,
    exposure: Array1<f64>,
    delta: Array1<f64>,
    upstream: Array1<f64>,
    capacity: usize,
}

impl EvalWorkspace {
    pub fn new(params: &MlpParams, p: usize) -> EvalWorkspace {
        let capacity = EVAL_CHUNK;
        EvalWorkspace {
            fwd: ForwardScratch::new(params, capacity),
            bwd: BackwardScratch::new(params, capacity),
            z: Array2::zeros((capacity, p)),
            exposure: Array1::zeros(capacity),
            delta: Array1::zeros(capacity),
            upstream: Array1::zeros(capacity),
            capacity,
        }
    }
}

struct ChunkSums {
    event: f64,
    exposure: f64,
    max_abs_g: f64,
}

/// Evaluates one gathered chunk: forward pass, χ guard, loss sums, and (when
/// `want_grad`) the per-row upstream weights for backpropagation.
fn eval_chunk(
    params: &MlpParams,
    theta: ArrayView1<f64>,
    ws: &mut EvalWorkspace,
    rows: usize,
    inv_n: f64,
    want_grad: bool,
    row_ids: &dyn Fn(usize) -> (u32, u32),
) -> Result<ChunkSums> {
    params.forward_batch(&mut ws.fwd, rows);
    let g = ws.fwd.outputs(rows);
    let mut sums = ChunkSums {
        event: 0.0,
        exposure: 0.0,
        max_abs_g: 0.0,
    };
    for r in 0..rows {
        let zth = ws.z.row(r).dot(&theta);
        let chi = g[r] + zth;
        if !(chi <= CHI_OVERFLOW) {
            let (subj, j) = row_ids(r);
            return Err(Error::numerical(format!(
                "linear predictor {chi:.3} exceeds {CHI_OVERFLOW} for subject {subj}, interval {j}; \
                 the hazard would overflow"
            )));
        }
        let e_chi = chi.exp();
        let w = ws.exposure[r];
        let dl = ws.delta[r];
        sums.event += dl * chi;
        sums.exposure += w * e_chi;
        sums.max_abs_g = sums.max_abs_g.max(g[r].abs());
        if want_grad {
            ws.upstream[r] = -(dl - w * e_chi) * inv_n;
        }
    }
    Ok(sums)
}

fn gather_chunk(rowset: &RowSet, idx: &[u32], ws: &mut EvalWorkspace) {
    let rows = idx.len();
    let mut inp = ws.fwd.input_rows_mut(rows);
    for (r, &i) in idx.iter().enumerate() {
        let i = i as usize;
        inp.row_mut(r).assign(&rowset.inputs.row(i));
        ws.z.row_mut(r).assign(&rowset.z.row(i));
        ws.exposure[r] = rowset.exposure[i];
        ws.delta[r] = rowset.delta[i];
    }
}

fn copy_chunk(rowset: &RowSet, start: usize, rows: usize, ws: &mut EvalWorkspace) {
    let mut inp = ws.fwd.input_rows_mut(rows);
    inp.assign(&rowset.inputs.slice(ndarray::s![start..start + rows, ..]));
    ws.z
        .slice_mut(ndarray::s![..rows, ..])
        .assign(&rowset.z.slice(ndarray::s![start..start + rows, ..]));
    ws.exposure
        .slice_mut(ndarray::s![..rows])
        .assign(&rowset.exposure.slice(ndarray::s![start..start + rows]));
    ws.delta
        .slice_mut(ndarray::s![..rows])
        .assign(&rowset.delta.slice(ndarray::s![start..start + rows]));
}

/// Per-row network outputs g(t_j, X_i) over the whole rowset.
pub(crate) fn eval_g_values(
    params: &MlpParams,
    rowset: &RowSet,
    ws: &mut EvalWorkspace,
) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(rowset.len());
    let mut start = 0;
    while start < rowset.len() {
        let rows = ws.capacity.min(rowset.len() - start);
        copy_chunk(rowset, start, rows, ws);
        params.forward_batch(&mut ws.fwd, rows);
        out.slice_mut(ndarray::s![start..start + rows])
            .assign(&ws.fwd.outputs(rows));
        start += rows;
    }
    Ok(out)
}

/// Full-rowset loss. Forward passes only.
pub(crate) fn eval_loss(
    params: &MlpParams,
    theta: ArrayView1<f64>,
    rowset: &RowSet,
    ws: &mut EvalWorkspace,
) -> Result<LossReport> {
    let mut event = 0.0;
    let mut exposure = 0.0;
    let mut max_abs_g = 0.0f64;
    let mut start = 0;
    while start < rowset.len() {
        let rows = ws.capacity.min(rowset.len() - start);
        copy_chunk(rowset, start, rows, ws);
        let sums = eval_chunk(params, theta, ws, rows, 0.0, false, &|r| {
            (rowset.subject[start + r], rowset.interval[start + r])
        })?;
        event += sums.event;
        exposure += sums.exposure;
        max_abs_g = max_abs_g.max(sums.max_abs_g);
        start += rows;
    }
    Ok(LossReport {
        neg_loglik: -(event - exposure) / rowset.n_norm,
        event_term: event,
        exposure_term: exposure,
        max_abs_g,
    })
}

/// Loss and gradients over the rows selected by `idx`, accumulated into
/// `grads` / `theta_grad` (both zeroed by the caller). Returns the selected
/// rows' contribution to neg_loglik under the rowset's 1/n normalization.
pub(crate) fn eval_grad_indexed(
    params: &MlpParams,
    theta: ArrayView1<f64>,
    rowset: &RowSet,
    idx: &[u32],
    ws: &mut EvalWorkspace,
    grads: &mut Gradients,
    theta_grad: &mut Array1<f64>,
) -> Result<f64> {
    let inv_n = 1.0 / rowset.n_norm;
    let mut event = 0.0;
    let mut exposure = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let rows = ws.capacity.min(idx.len() - start);
        let chunk = &idx[start..start + rows];
        gather_chunk(rowset, chunk, ws);
        let sums = eval_chunk(params, theta, ws, rows, inv_n, true, &|r| {
            let i = chunk[r] as usize;
            (rowset.subject[i], rowset.interval[i])
        })?;
        event += sums.event;
        exposure += sums.exposure;
        // θ-gradient: Σ_r upstream_r · z_r (upstream carries -(δ-w e^χ)/n).
        let z = ws.z.slice(ndarray::s![..rows, ..]);
        let up = ws.upstream.slice(ndarray::s![..rows]);
        ndarray::linalg::general_mat_vec_mul(1.0, &z.t(), &up, 1.0, theta_grad);
        params.backward_batch(&ws.fwd, &mut ws.bwd, up, grads, rows);
        start += rows;
    }
    Ok(-(event - exposure) * inv_n)
}

/// θ-Hessian of neg_loglik over the rowset: (1/n) Σ w e^χ z zᵀ.
pub(crate) fn eval_theta_hessian(
    params: &MlpParams,
    theta: ArrayView1<f64>,
    rowset: &RowSet,
    ws: &mut EvalWorkspace,
) -> Result<Array2<f64>> {
    let p = theta.len();
    let inv_n = 1.0 / rowset.n_norm;
    let mut hess = Array2::<f64>::zeros((p, p));
    let mut scaled = Array2::<f64>::zeros((ws.capacity, p));
    let mut start = 0;
    while start < rowset.len() {
        let rows = ws.capacity.min(rowset.len() - start);
        copy_chunk(rowset, start, rows, ws);
        params.forward_batch(&mut ws.fwd, rows);
        let g = ws.fwd.outputs(rows);
        for r in 0..rows {
            let chi = g[r] + ws.z.row(r).dot(&theta);
            if !(chi <= CHI_OVERFLOW) {
                return Err(Error::numerical(format!(
                    "linear predictor {chi:.3} exceeds {CHI_OVERFLOW} for subject {}, interval {}",
                    rowset.subject[start + r],
                    rowset.interval[start + r]
                )));
            }
            let s = (ws.exposure[r] * chi.exp() * inv_n).sqrt();
            for k in 0..p {
                scaled[[r, k]] = s * ws.z[[r, k]];
            }
        }
        let sc = scaled.slice(ndarray::s![..rows, ..]);
        ndarray::linalg::general_mat_mul(1.0, &sc.t(), &sc, 1.0, &mut hess.view_mut());
        start += rows;
    }
    // Kill round-off asymmetry from the accumulated products.
    for i in 0..p {
        for j in 0..i {
            let m = 0.5 * (hess[[i, j]] + hess[[j, i]]);
            hess[[i, j]] = m;
            hess[[j, i]] = m;
        }
    }
    Ok(hess)
}

/// Negative discretized log-likelihood, normalized by the dataset's subject
/// count, with its event and exposure summands reported separately.
pub fn neg_loglik(
    state: &ModelState,
    rows: &[ExpandedRow],
    dataset: &Dataset,
) -> Result<LossReport> {
    state.check_dims(dataset)?;
    let rowset = RowSet::new(rows, dataset, dataset.len());
    let mut ws = EvalWorkspace::new(&state.g_params, dataset.p());
    eval_loss(&state.g_params, state.theta.view(), &rowset, &mut ws)
}

/// Exact gradients of [`neg_loglik`] with respect to the network parameters
/// and θ.
pub fn loss_gradients(
    state: &ModelState,
    rows: &[ExpandedRow],
    dataset: &Dataset,
) -> Result<(Gradients, Array1<f64>)> {
    state.check_dims(dataset)?;
    let rowset = RowSet::new(rows, dataset, dataset.len());
    let mut ws = EvalWorkspace::new(&state.g_params, dataset.p());
    let mut grads = Gradients::zeros_like(&state.g_params);
    let mut theta_grad = Array1::zeros(dataset.p());
    let idx: Vec<u32> = (0..rowset.len() as u32).collect();
    eval_grad_indexed(
        &state.g_params,
        state.theta.view(),
        &rowset,
        &idx,
        &mut ws,
        &mut grads,
        &mut theta_grad,
    )?;
    Ok((grads, theta_grad))
}

/// θ-Hessian of [`neg_loglik`]: symmetric positive semidefinite by
/// construction.
pub fn theta_hessian(
    state: &ModelState,
    rows: &[ExpandedRow],
    dataset: &Dataset,
) -> Result<Array2<f64>> {
    state.check_dims(dataset)?;
    let rowset = RowSet::new(rows, dataset, dataset.len());
    let mut ws = EvalWorkspace::new(&state.g_params, dataset.p());
    eval_theta_hessian(&state.g_params, state.theta.view(), &rowset, &mut ws)
}

/// Discretized log-likelihood (positive sign) at a given grid resolution:
/// builds the grid, expands, and evaluates. Used to study mesh convergence.
pub fn loglik_with_mesh(
    state: &ModelState,
    dataset: &Dataset,
    grid_size: usize,
    tau: f64,
) -> Result<f64> {
    let grid: TimeGrid = crate::data::build_grid(dataset, grid_size, tau)?;
    let rows = crate::data::expand(dataset, &grid)?;
    let report = neg_loglik(state, &rows, dataset)?;
    Ok(-report.neg_loglik)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_grid, expand, SurvivalRecord};
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Network computing g ≡ 0 for d nuisance covariates.
    fn zero_net(d: usize) -> MlpParams {
        MlpParams::from_layers(
            vec![Array2::zeros((1, 1 + d))],
            vec![Array1::zeros(1)],
        )
        .unwrap()
    }

    /// Network computing g(t, x) = t exactly (valid for t ≥ 0).
    fn identity_in_time_net(d: usize) -> MlpParams {
        let mut w0 = Array2::zeros((1, 1 + d));
        w0[[0, 0]] = 1.0;
        MlpParams::from_layers(
            vec![w0, arr2(&[[1.0]])],
            vec![Array1::zeros(1), Array1::zeros(1)],
        )
        .unwrap()
    }

    fn one_subject(time: f64, event: bool, z: Vec<f64>) -> Dataset {
        Dataset::from_records(vec![SurvivalRecord {
            time,
            event,
            x: vec![0.5],
            z,
        }])
        .unwrap()
    }

    #[test]
    fn hand_example_event_subject() {
        let ds = one_subject(1.0, true, vec![0.0]);
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0], 1.0).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(zero_net(1), Array1::zeros(1)).unwrap();
        let rep = neg_loglik(&state, &rows, &ds).unwrap();
        assert_relative_eq!(rep.neg_loglik, 1.0, epsilon = 1e-15);
        assert_eq!(rep.event_term, 0.0);
        assert_relative_eq!(rep.exposure_term, 1.0, epsilon = 1e-15);
        assert_eq!(rep.max_abs_g, 0.0);
    }

    #[test]
    fn hand_example_censored_subject_same_loss() {
        let ds = one_subject(1.0, false, vec![0.0]);
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0], 1.0).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(zero_net(1), Array1::zeros(1)).unwrap();
        let rep = neg_loglik(&state, &rows, &ds).unwrap();
        assert_relative_eq!(rep.neg_loglik, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn shift_identity_at_log_two() {
        // θᵀz = ln 2, g ≡ 0, one event subject: ℓ̃ = ln2 - 2.
        let ds = one_subject(1.0, true, vec![1.0]);
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0], 1.0).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let c = std::f64::consts::LN_2;
        let state = ModelState::new(zero_net(1), Array1::from_vec(vec![c])).unwrap();
        let rep = neg_loglik(&state, &rows, &ds).unwrap();
        assert_relative_eq!(-rep.neg_loglik, c - 2.0, epsilon = 1e-14);
        assert_relative_eq!(rep.event_term, c, epsilon = 1e-15);
        assert_relative_eq!(rep.exposure_term, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn stationary_rows_give_zero_gradient() {
        // δ = w e^χ = 1 on the single row: score equation satisfied.
        let ds = one_subject(1.0, true, vec![1.0]);
        let grid = TimeGrid::new(vec![0.0, 1.0], 1.0).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(zero_net(1), Array1::zeros(1)).unwrap();
        let (grads, tg) = loss_gradients(&state, &rows, &ds).unwrap();
        assert!(tg.iter().all(|&v| v == 0.0));
        assert!(grads.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(grads.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_row_theta_gradient_hand_value() {
        // g ≡ 0, θ = 0, z = 1, δ = 1, exposure = 0.5, n = 1 → grad = -0.5.
        let ds = one_subject(0.5, true, vec![1.0]);
        let grid = TimeGrid::new(vec![0.0, 0.5], 0.5).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(zero_net(1), Array1::zeros(1)).unwrap();
        let (_, tg) = loss_gradients(&state, &rows, &ds).unwrap();
        assert_relative_eq!(tg[0], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn hessian_single_row_outer_product() {
        let ds = Dataset::from_records(vec![SurvivalRecord {
            time: 0.5,
            event: false,
            x: vec![0.0],
            z: vec![1.0, 2.0],
        }])
        .unwrap();
        let grid = TimeGrid::new(vec![0.0, 0.5], 0.5).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(zero_net(1), Array1::zeros(2)).unwrap();
        let h = theta_hessian(&state, &rows, &ds).unwrap();
        let expected = arr2(&[[0.5, 1.0], [1.0, 2.0]]);
        for (a, b) in h.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn hessian_zero_exposure_rows() {
        // Event exactly on a breakpoint: the only row has the full exposure;
        // scale z to zero to get the all-zero case instead.
        let ds = Dataset::from_records(vec![SurvivalRecord {
            time: 0.5,
            event: false,
            x: vec![0.0],
            z: vec![0.0, 0.0],
        }])
        .unwrap();
        let grid = TimeGrid::new(vec![0.0, 0.5], 0.5).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(zero_net(1), Array1::zeros(2)).unwrap();
        let h = theta_hessian(&state, &rows, &ds).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overflow_is_reported_with_subject() {
        let ds = one_subject(1.0, true, vec![1.0]);
        let grid = TimeGrid::new(vec![0.0, 1.0], 1.0).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(zero_net(1), Array1::from_vec(vec![800.0])).unwrap();
        let err = neg_loglik(&state, &rows, &ds).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("subject 0"), "message was: {msg}");
    }

    fn random_small_dataset(rng: &mut ChaCha12Rng, d: usize, p: usize) -> Dataset {
        let n = rng.random_range(3..7);
        let records = (0..n)
            .map(|_| SurvivalRecord {
                time: rng.random_range(0.05..1.0),
                event: rng.random_range(0.0..1.0) < 0.7,
                x: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                z: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        Dataset::from_records(records).unwrap()
    }

    /// Random network with biases perturbed off zero and pre-activations
    /// checked away from ReLU kinks on every expanded row.
    fn random_state_clear_of_kinks(
        rng: &mut ChaCha12Rng,
        ds: &Dataset,
        rows: &[ExpandedRow],
    ) -> Option<ModelState> {
        let widths = vec![1 + ds.d(), 4, 3, 1];
        let mut params = MlpParams::init(&widths, rng.random::<u64>()).unwrap();
        let perturbed: Vec<Array1<f64>> = (0..params.num_layers())
            .map(|l| params.bias(l).mapv(|_| rng.random_range(-0.3..0.3)))
            .collect();
        params = MlpParams::from_layers(
            (0..params.num_layers())
                .map(|l| params.weight(l).clone())
                .collect(),
            perturbed,
        )
        .unwrap();
        let theta = Array1::from_shape_fn(ds.p(), |_| rng.random_range(-0.5..0.5));
        for row in rows {
            let mut u = vec![row.eval_time];
            u.extend_from_slice(&ds.record(row.subject).x);
            let mut act = Array1::from_vec(u);
            for l in 0..params.num_layers() {
                let pre = params.weight(l).dot(&act) + params.bias(l);
                if l < params.num_layers() - 1 {
                    if pre.iter().any(|v| v.abs() < 1e-3) {
                        return None;
                    }
                    act = pre.mapv(|v| v.max(0.0));
                } else {
                    act = pre;
                }
            }
        }
        Some(ModelState::new(params, theta).unwrap())
    }

    fn check_close(analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(1e-300);
        assert!(
            abs < 1e-9 || rel < 1e-6,
            "mismatch: analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(314159);
        let mut done = 0;
        while done < 12 {
            let ds = random_small_dataset(&mut rng, 2, 2);
            let grid = build_grid(&ds, 4, 1.0).unwrap();
            let rows = expand(&ds, &grid).unwrap();
            let Some(state) = random_state_clear_of_kinks(&mut rng, &ds, &rows) else {
                continue;
            };
            let (grads, tg) = loss_gradients(&state, &rows, &ds).unwrap();
            let h = 1e-6;
            let loss_at = |s: &ModelState| neg_loglik(s, &rows, &ds).unwrap().neg_loglik;
            for k in 0..ds.p() {
                let mut plus = state.clone();
                plus.theta[k] += h;
                let mut minus = state.clone();
                minus.theta[k] -= h;
                check_close(tg[k], (loss_at(&plus) - loss_at(&minus)) / (2.0 * h));
            }
            for l in 0..state.g_params.num_layers() {
                for idx in 0..state.g_params.weight(l).len() {
                    let ncols = state.g_params.weight(l).ncols();
                    let (r, c) = (idx / ncols, idx % ncols);
                    let perturb = |eps: f64| {
                        let mut s = state.clone();
                        let mut ws: Vec<Array2<f64>> = (0..s.g_params.num_layers())
                            .map(|q| s.g_params.weight(q).clone())
                            .collect();
                        let bs: Vec<Array1<f64>> = (0..s.g_params.num_layers())
                            .map(|q| s.g_params.bias(q).clone())
                            .collect();
                        ws[l][[r, c]] += eps;
                        s.g_params = MlpParams::from_layers(ws, bs).unwrap();
                        loss_at(&s)
                    };
                    check_close(
                        grads.weights[l][[r, c]],
                        (perturb(h) - perturb(-h)) / (2.0 * h),
                    );
                }
            }
            done += 1;
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(2718);
        let ds = random_small_dataset(&mut rng, 1, 2);
        let grid = build_grid(&ds, 5, 1.0).unwrap();
        let rows = expand(&ds, &grid).unwrap();
        let state = ModelState::new(
            zero_net(1),
            Array1::from_vec(vec![0.3, -0.2]),
        )
        .unwrap();
        let hess = theta_hessian(&state, &rows, &ds).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut plus = state.clone();
            plus.theta[k] += h;
            let mut minus = state.clone();
            minus.theta[k] -= h;
            let gp = loss_gradients(&plus, &rows, &ds).unwrap().1;
            let gm = loss_gradients(&minus, &rows, &ds).unwrap().1;
            for j in 0..2 {
                check_close(hess[[j, k]], (gp[j] - gm[j]) / (2.0 * h));
            }
        }
    }

    #[test]
    fn mesh_value_exact_for_constant_g() {
        // g ≡ 0: the integrand is piecewise constant, so the Riemann sum is
        // exact at any resolution.
        let ds = one_subject(1.0, false, vec![0.0]);
        let state = ModelState::new(zero_net(1), Array1::zeros(1)).unwrap();
        let a = loglik_with_mesh(&state, &ds, 3, 1.0).unwrap();
        let b = loglik_with_mesh(&state, &ds, 97, 1.0).unwrap();
        assert_relative_eq!(a, -1.0, epsilon = 1e-14);
        assert_relative_eq!(a, b, epsilon = 1e-13);
    }

    #[test]
    fn mesh_error_decays_for_exponential_integrand() {
        // g(t,x) = t, θ = 0, T = 1, Δ = 0: exact value -(e - 1).
        let ds = one_subject(1.0, false, vec![0.0]);
        let state = ModelState::new(identity_in_time_net(1), Array1::zeros(1)).unwrap();
        let exact = -(std::f64::consts::E - 1.0);
        let mut prev_err = f64::INFINITY;
        for m in [16usize, 32, 64, 128, 256] {
            let val = loglik_with_mesh(&state, &ds, m, 1.0).unwrap();
            let err = (val - exact).abs();
            assert!(err < prev_err, "error not decreasing at m = {m}");
            prev_err = err;
        }
        // Error roughly halves per mesh halving (first-order quadrature).
        let e64 = (loglik_with_mesh(&state, &ds, 64, 1.0).unwrap() - exact).abs();
        let e128 = (loglik_with_mesh(&state, &ds, 128, 1.0).unwrap() - exact).abs();
        let ratio = e64 / e128;
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn model_state_json_round_trip() {
        let state = ModelState::new(
            MlpParams::init(&[3, 6, 1], 5).unwrap(),
            Array1::from_vec(vec![1.5, -0.5]),
        )
        .unwrap();
        let json = serde_json::to_string(&state).unwrap();
        let back: ModelState = serde_json::from_str(&json).unwrap();
        assert_eq!(state, back);
    }
}
