//! Dense feedforward ReLU networks with exact reverse-mode gradients and an
//! ADAM optimizer.
//!
//! The network computes `W_K σ(W_{K-1} σ(⋯ σ(W_0 u + v_0) ⋯) + v_{K-1}) + v_K`
//! with `σ(x) = max(x, 0)` applied componentwise and a scalar output. Shapes
//! are carried by a width vector `(p_0, …, p_{K+1})` with `p_{K+1} = 1`.
//!
//! Two call paths are provided: a shape-checked single-input path
//! ([`MlpParams::forward`] / [`MlpParams::backward`]) used by tests and small
//! consumers, and a batched path over preallocated scratch buffers
//! ([`MlpParams::forward_batch`] / [`MlpParams::backward_batch`]) used by the
//! training loops. Both share the same arithmetic.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a dense ReLU network with scalar output.
///
/// `weights[l]` has shape `(widths[l+1], widths[l])`; `biases[l]` has length
/// `widths[l+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpParamsDoc", into = "MlpParamsDoc")]
pub struct MlpParams {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Row-major JSON form of [`MlpParams`] used for checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParamsDoc {
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<MlpParams> for MlpParamsDoc {
    fn from(p: MlpParams) -> Self {
        MlpParamsDoc {
            widths: p.widths.clone(),
            weights: p
                .weights
                .iter()
                .map(|w| w.iter().copied().collect())
                .collect(),
            biases: p.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpParamsDoc> for MlpParams {
    type Error = Error;

    fn try_from(doc: MlpParamsDoc) -> Result<Self> {
        validate_widths(&doc.widths)?;
        let layers = doc.widths.len() - 1;
        if doc.weights.len() != layers || doc.biases.len() != layers {
            return Err(Error::shape(format!(
                "expected {layers} weight/bias layers, got {}/{}",
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (rows, cols) = (doc.widths[l + 1], doc.widths[l]);
            if doc.weights[l].len() != rows * cols {
                return Err(Error::shape(format!(
                    "layer {l}: expected {rows}x{cols} weights, got {} values",
                    doc.weights[l].len()
                )));
            }
            if doc.biases[l].len() != rows {
                return Err(Error::shape(format!(
                    "layer {l}: expected {rows} biases, got {}",
                    doc.biases[l].len()
                )));
            }
            let w = Array2::from_shape_vec((rows, cols), doc.weights[l].clone())
                .expect("shape checked above");
            let b = Array1::from_vec(doc.biases[l].clone());
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::shape(format!("layer {l}: non-finite parameter")));
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(MlpParams {
            widths: doc.widths,
            weights,
            biases,
        })
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::config(format!(
            "width vector needs at least input and output entries, got {widths:?}"
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::config(format!("zero width in {widths:?}")));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::config(format!(
            "output width must be 1, got {widths:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// He-uniform initialization: weights drawn from U(-√(6/fan_in), √(6/fan_in)),
    /// biases zero. Deterministic given `seed`.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-limit..limit)
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(MlpParams {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a network from explicit layer values. Used to pin exact
    /// functions (e.g. the identity in t) in tests and mesh checks.
    pub fn from_layers(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        let mut widths = Vec::with_capacity(weights.len() + 1);
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::shape(
                "need matching, non-empty weight and bias lists".to_string(),
            ));
        }
        widths.push(weights[0].ncols());
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::shape(format!(
                    "layer {l}: {} weight rows vs {} biases",
                    w.nrows(),
                    b.len()
                )));
            }
            if l > 0 && w.ncols() != weights[l - 1].nrows() {
                return Err(Error::shape(format!("layer {l}: input width mismatch")));
            }
            widths.push(w.nrows());
        }
        validate_widths(&widths)?;
        Ok(MlpParams {
            widths,
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Evaluates the network on a single input, returning the scalar output
    /// and the activation cache consumed by [`MlpParams::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(f64, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input length {} does not match network input width {}",
                input.len(),
                self.input_dim()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite network input".to_string()));
        }
        let mut scratch = ForwardScratch::new(self, 1);
        scratch.input_rows_mut(1).row_mut(0).assign(
            &ArrayView1::from(input),
        );
        self.forward_batch(&mut scratch, 1);
        let out = scratch.outputs(1)[0];
        Ok((out, ForwardCache { scratch }))
    }

    /// Gradients of `upstream * output` with respect to every weight and bias.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64) -> Result<Gradients> {
        if cache.scratch.layer_widths != self.widths {
            return Err(Error::shape(
                "activation cache does not match network shape".to_string(),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut bwd = BackwardScratch::new(self, 1);
        let up = Array1::from_vec(vec![upstream]);
        self.backward_batch(&cache.scratch, &mut bwd, up.view(), &mut grads, 1);
        Ok(grads)
    }

    /// Gradient of `upstream * output` with respect to the input vector.
    /// Exact within a fixed ReLU activation region.
    pub fn input_gradient(&self, cache: &ForwardCache, upstream: f64) -> Result<Array1<f64>> {
        if cache.scratch.layer_widths != self.widths {
            return Err(Error::shape(
                "activation cache does not match network shape".to_string(),
            ));
        }
        // Backpropagate d/d(activation) down to the input row.
        let last = self.num_layers() - 1;
        let mut d = Array2::from_elem((1, 1), upstream);
        for l in (0..=last).rev() {
            if l < last {
                // Mask by the stored post-activation sign (a > 0 ⇔ pre > 0).
                let act = cache.scratch.acts[l].slice(ndarray::s![..1, ..]);
                d.zip_mut_with(&act, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = d.dot(&self.weights[l]);
        }
        Ok(d.row(0).to_owned())
    }

    /// Batched forward pass over `scratch.input[..rows]`. Fills the per-layer
    /// activation buffers; outputs land in the last activation column.
    pub fn forward_batch(&self, scratch: &mut ForwardScratch, rows: usize) {
        debug_assert!(rows <= scratch.capacity);
        let last = self.num_layers() - 1;
        for l in 0..=last {
            if l == 0 {
                let inp = scratch.input.slice(ndarray::s![..rows, ..]);
                let mut out = scratch.acts[0].slice_mut(ndarray::s![..rows, ..]);
                ndarray::linalg::general_mat_mul(1.0, &inp, &self.weights[0].t(), 0.0, &mut out);
            } else {
                let (prev, rest) = scratch.acts.split_at_mut(l);
                let inp = prev[l - 1].slice(ndarray::s![..rows, ..]);
                let mut out = rest[0].slice_mut(ndarray::s![..rows, ..]);
                ndarray::linalg::general_mat_mul(1.0, &inp, &self.weights[l].t(), 0.0, &mut out);
            }
            let mut out = scratch.acts[l].slice_mut(ndarray::s![..rows, ..]);
            let bias = &self.biases[l];
            if l < last {
                for mut row in out.rows_mut() {
                    row.zip_mut_with(bias, |o, &b| {
                        *o = (*o + b).max(0.0);
                    });
                }
            } else {
                for mut row in out.rows_mut() {
                    row.zip_mut_with(bias, |o, &b| *o += b);
                }
            }
        }
    }

    /// Accumulates parameter gradients of `Σ_r upstream[r] * output[r]` into
    /// `grads`, reading activations cached by a matching `forward_batch`.
    pub fn backward_batch(
        &self,
        fwd: &ForwardScratch,
        bwd: &mut BackwardScratch,
        upstream: ArrayView1<f64>,
        grads: &mut Gradients,
        rows: usize,
    ) {
        debug_assert_eq!(upstream.len(), rows);
        let last = self.num_layers() - 1;
        bwd.dacts[last]
            .slice_mut(ndarray::s![..rows, 0])
            .assign(&upstream);
        for l in (0..=last).rev() {
            if l < last {
                // ReLU mask: zero where the stored activation was clamped.
                let act = fwd.acts[l].slice(ndarray::s![..rows, ..]);
                let mut d = bwd.dacts[l].slice_mut(ndarray::s![..rows, ..]);
                d.zip_mut_with(&act, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let dpre = bwd.dacts[l].slice(ndarray::s![..rows, ..]);
            let inp = fwd.layer_input(l, rows);
            let mut gw = grads.weights[l].view_mut();
            ndarray::linalg::general_mat_mul(1.0, &dpre.t(), &inp, 1.0, &mut gw);
            grads.biases[l] += &dpre.sum_axis(Axis(0));
            if l > 0 {
                let (prev, rest) = bwd.dacts.split_at_mut(l);
                let dpre = rest[0].slice(ndarray::s![..rows, ..]);
                let mut dprev = prev[l - 1].slice_mut(ndarray::s![..rows, ..]);
                ndarray::linalg::general_mat_mul(1.0, &dpre, &self.weights[l], 0.0, &mut dprev);
            }
        }
    }

    /// Largest absolute weight or bias, used by training diagnostics.
    pub fn max_abs_parameter(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Per-layer activation buffers for batched evaluation. Reused across steps.
pub struct ForwardScratch {
    capacity: usize,
    layer_widths: Vec<usize>,
    input: Array2<f64>,
    /// `acts[l]` holds layer l's output rows (post-ReLU for hidden layers).
    acts: Vec<Array2<f64>>,
}

impl ForwardScratch {
    pub fn new(params: &MlpParams, capacity: usize) -> Self {
        let acts = params
            .widths
            .iter()
            .skip(1)
            .map(|&w| Array2::zeros((capacity, w)))
            .collect();
        ForwardScratch {
            capacity,
            layer_widths: params.widths.clone(),
            input: Array2::zeros((capacity, params.input_dim())),
            acts,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Mutable view of the first `rows` input rows, to be filled by the caller.
    pub fn input_rows_mut(&mut self, rows: usize) -> ArrayViewMut2<f64> {
        self.input.slice_mut(ndarray::s![..rows, ..])
    }

    /// Scalar outputs of the last `forward_batch(rows)` call.
    pub fn outputs(&self, rows: usize) -> ArrayView1<f64> {
        self.acts.last().unwrap().slice(ndarray::s![..rows, 0])
    }

    fn layer_input(&self, l: usize, rows: usize) -> ndarray::ArrayView2<f64> {
        if l == 0 {
            self.input.slice(ndarray::s![..rows, ..])
        } else {
            self.acts[l - 1].slice(ndarray::s![..rows, ..])
        }
    }
}

/// Backward-pass workspaces matching a [`ForwardScratch`].
pub struct BackwardScratch {
    dacts: Vec<Array2<f64>>,
}

impl BackwardScratch {
    pub fn new(params: &MlpParams, capacity: usize) -> Self {
        BackwardScratch {
            dacts: params
                .widths
                .iter()
                .skip(1)
                .map(|&w| Array2::zeros((capacity, w)))
                .collect(),
        }
    }
}

/// Activation cache returned by the single-input [`MlpParams::forward`].
pub struct ForwardCache {
    scratch: ForwardScratch,
}

/// Parameter gradients, shaped exactly like [`MlpParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .all(|v| v.is_finite())
    }
}

/// First/second-moment accumulators for ADAM over the network parameters and
/// the linear coefficients, plus the optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    m_theta: Array1<f64>,
    v_theta: Array1<f64>,
}

impl AdamState {
    pub fn new(params: &MlpParams, theta_len: usize, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m_w: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_w: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_b: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_b: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            m_theta: Array1::zeros(theta_len),
            v_theta: Array1::zeros(theta_len),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

fn adam_update(
    param: &mut f64,
    m: &mut f64,
    v: &mut f64,
    grad: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *param -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// One bias-corrected ADAM update of the network parameters and `theta`
/// jointly. Increments the step counter by exactly one.
pub fn adam_step(
    params: &mut MlpParams,
    theta: &mut Array1<f64>,
    grads: &Gradients,
    theta_grad: ArrayView1<f64>,
    state: &mut AdamState,
) -> Result<()> {
    if !grads.is_finite() || theta_grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training(
            "non-finite gradient passed to the optimizer".to_string(),
        ));
    }
    let t = state.step_count + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let (lr, b1, b2, eps) = (
        state.learning_rate,
        state.beta1,
        state.beta2,
        state.epsilon,
    );
    for l in 0..params.weights.len() {
        ndarray::Zip::from(&mut params.weights[l])
            .and(&mut state.m_w[l])
            .and(&mut state.v_w[l])
            .and(&grads.weights[l])
            .for_each(|p, m, v, &g| adam_update(p, m, v, g, lr, b1, b2, eps, bc1, bc2));
        ndarray::Zip::from(&mut params.biases[l])
            .and(&mut state.m_b[l])
            .and(&mut state.v_b[l])
            .and(&grads.biases[l])
            .for_each(|p, m, v, &g| adam_update(p, m, v, g, lr, b1, b2, eps, bc1, bc2));
    }
    ndarray::Zip::from(theta)
        .and(&mut state.m_theta)
        .and(&mut state.v_theta)
        .and(&theta_grad)
        .for_each(|p, m, v, &g| adam_update(p, m, v, g, lr, b1, b2, eps, bc1, bc2));
    state.step_count = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;

    fn finite_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn init_shapes_match_widths() {
        let p = MlpParams::init(&[4, 20, 20, 1], 0).unwrap();
        assert_eq!(p.num_layers(), 3);
        assert_eq!(p.weight(0).dim(), (20, 4));
        assert_eq!(p.weight(1).dim(), (20, 20));
        assert_eq!(p.weight(2).dim(), (1, 20));
        for l in 0..3 {
            assert!(p.bias(l).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_minimal_widths() {
        let p = MlpParams::init(&[2, 1], 123).unwrap();
        assert_eq!(p.num_layers(), 1);
        assert_eq!(p.weight(0).dim(), (1, 2));
        assert_eq!(p.bias(0)[0], 0.0);
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpParams::init(&[3, 8, 1], 42).unwrap();
        let b = MlpParams::init(&[3, 8, 1], 42).unwrap();
        assert_eq!(a, b);
        let c = MlpParams::init(&[3, 8, 1], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_widths() {
        assert!(MlpParams::init(&[3], 0).is_err());
        assert!(MlpParams::init(&[3, 0, 1], 0).is_err());
        assert!(MlpParams::init(&[3, 4, 2], 0).is_err());
        assert!(MlpParams::init(&[], 0).is_err());
    }

    #[test]
    fn forward_zero_weights_returns_bias() {
        let mut p = MlpParams::init(&[3, 5, 1], 7).unwrap();
        for l in 0..p.num_layers() {
            p.weights[l].fill(0.0);
        }
        p.biases[1][0] = -2.5;
        for u in [[0.0, 0.0, 0.0], [1.0, -3.0, 9.0]] {
            let (out, _) = p.forward(&u).unwrap();
            assert_eq!(out, -2.5);
        }
    }

    #[test]
    fn forward_hand_computed_single_hidden_unit() {
        // W0=[1], v0=-2, W1=[3], v1=1
        let p = MlpParams::from_layers(
            vec![arr2(&[[1.0]]), arr2(&[[3.0]])],
            vec![Array1::from_vec(vec![-2.0]), Array1::from_vec(vec![1.0])],
        )
        .unwrap();
        let (out, _) = p.forward(&[5.0]).unwrap();
        assert_eq!(out, 10.0); // σ(5-2)=3, 3*3+1
        let (out, _) = p.forward(&[1.0]).unwrap();
        assert_eq!(out, 1.0); // σ(-1)=0
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let p = MlpParams::init(&[3, 4, 1], 0).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_pure() {
        let p = MlpParams::init(&[4, 6, 6, 1], 9).unwrap();
        let u = [0.3, -1.2, 0.7, 2.0];
        let (a, _) = p.forward(&u).unwrap();
        let (b, _) = p.forward(&u).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradients() {
        let p = MlpParams::init(&[3, 6, 1], 5).unwrap();
        let (_, cache) = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        let g = p.backward(&cache, 0.0).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_affine_layer() {
        // Single linear layer g(u) = W u + v: dg/dW = u^T, dg/dv = 1.
        let p = MlpParams::from_layers(
            vec![arr2(&[[2.0, -1.0, 0.5]])],
            vec![Array1::from_vec(vec![0.3])],
        )
        .unwrap();
        let u = [1.5, -0.5, 4.0];
        let (_, cache) = p.forward(&u).unwrap();
        let g = p.backward(&cache, 1.0).unwrap();
        assert_eq!(g.weights[0], arr2(&[[1.5, -0.5, 4.0]]));
        assert_eq!(g.biases[0][0], 1.0);
    }

    /// Draws a random network/input pair whose pre-activations stay away from
    /// the ReLU kinks, so central differences are a valid oracle.
    fn random_smooth_instance(rng: &mut ChaCha12Rng) -> (MlpParams, Vec<f64>) {
        'outer: loop {
            let widths = [
                vec![2, 4, 1],
                vec![3, 5, 4, 1],
                vec![4, 8, 8, 1],
                vec![1, 3, 1],
            ][rng.random_range(0..4)]
            .clone();
            let mut p = MlpParams::init(&widths, rng.random::<u64>()).unwrap();
            for l in 0..p.num_layers() {
                for b in p.biases[l].iter_mut() {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
            let u: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.5..1.5)).collect();
            // Reject kink-adjacent instances.
            let mut act = Array1::from_vec(u.clone());
            for l in 0..p.num_layers() {
                let pre = p.weight(l).dot(&act) + p.bias(l);
                if l < p.num_layers() - 1 {
                    if pre.iter().any(|v| v.abs() < 1e-3) {
                        continue 'outer;
                    }
                    act = pre.mapv(|v| v.max(0.0));
                } else {
                    act = pre;
                }
            }
            return (p, u);
        }
    }

    fn check_close(analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(1e-300);
        assert!(
            abs < 1e-9 || rel < 1e-6,
            "gradient mismatch: analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let (p, u) = random_smooth_instance(&mut rng);
            let upstream = rng.random_range(0.5..2.0);
            let (_, cache) = p.forward(&u).unwrap();
            let grads = p.backward(&cache, upstream).unwrap();
            let h = 1e-6;
            for l in 0..p.num_layers() {
                for idx in 0..p.weight(l).len() {
                    let (r, c) = (idx / p.weight(l).ncols(), idx % p.weight(l).ncols());
                    let base = p.weight(l)[[r, c]];
                    let num = finite_difference(
                        |x| {
                            let mut q = p.clone();
                            q.weights[l][[r, c]] = x;
                            upstream * q.forward(&u).unwrap().0
                        },
                        base,
                        h,
                    );
                    check_close(grads.weights[l][[r, c]], num);
                }
                for r in 0..p.bias(l).len() {
                    let base = p.bias(l)[r];
                    let num = finite_difference(
                        |x| {
                            let mut q = p.clone();
                            q.biases[l][r] = x;
                            upstream * q.forward(&u).unwrap().0
                        },
                        base,
                        h,
                    );
                    check_close(grads.biases[l][r], num);
                }
            }
        }
    }

    #[test]
    fn input_jacobian_exact_within_relu_region() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..20 {
            let (p, u) = random_smooth_instance(&mut rng);
            let (_, cache) = p.forward(&u).unwrap();
            let jac = p.input_gradient(&cache, 1.0).unwrap();
            for k in 0..u.len() {
                let num = finite_difference(
                    |x| {
                        let mut v = u.clone();
                        v[k] = x;
                        p.forward(&v).unwrap().0
                    },
                    u[k],
                    1e-6,
                );
                check_close(jac[k], num);
            }
        }
    }

    #[test]
    fn batch_forward_matches_single() {
        let p = MlpParams::init(&[3, 7, 5, 1], 11).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let rows = 17;
        let mut scratch = ForwardScratch::new(&p, rows);
        let inputs: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        {
            let mut inp = scratch.input_rows_mut(rows);
            for (r, u) in inputs.iter().enumerate() {
                inp.row_mut(r).assign(&ArrayView1::from(u.as_slice()));
            }
        }
        p.forward_batch(&mut scratch, rows);
        for (r, u) in inputs.iter().enumerate() {
            let (single, _) = p.forward(u).unwrap();
            assert_eq!(scratch.outputs(rows)[r].to_bits(), single.to_bits());
        }
    }

    #[test]
    fn batch_backward_matches_sum_of_singles() {
        let p = MlpParams::init(&[2, 6, 1], 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let rows = 9;
        let inputs: Vec<Vec<f64>> = (0..rows)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let ups: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut fwd = ForwardScratch::new(&p, rows);
        {
            let mut inp = fwd.input_rows_mut(rows);
            for (r, u) in inputs.iter().enumerate() {
                inp.row_mut(r).assign(&ArrayView1::from(u.as_slice()));
            }
        }
        p.forward_batch(&mut fwd, rows);
        let mut bwd = BackwardScratch::new(&p, rows);
        let mut batch_grads = Gradients::zeros_like(&p);
        p.backward_batch(
            &fwd,
            &mut bwd,
            ArrayView1::from(ups.as_slice()),
            &mut batch_grads,
            rows,
        );

        let mut sum = Gradients::zeros_like(&p);
        for (u, &up) in inputs.iter().zip(&ups) {
            let (_, cache) = p.forward(u).unwrap();
            let g = p.backward(&cache, up).unwrap();
            for l in 0..p.num_layers() {
                sum.weights[l] += &g.weights[l];
                sum.biases[l] += &g.biases[l];
            }
        }
        for l in 0..p.num_layers() {
            for (a, b) in batch_grads.weights[l].iter().zip(sum.weights[l].iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = MlpParams::init(&[2, 3, 1], 0).unwrap();
        let snapshot = p.clone();
        let mut theta = Array1::from_vec(vec![0.4, -0.2]);
        let mut state = AdamState::new(&p, 2, 1e-3);
        let grads = Gradients::zeros_like(&p);
        let tg = Array1::zeros(2);
        adam_step(&mut p, &mut theta, &grads, tg.view(), &mut state).unwrap();
        assert_eq!(p, snapshot);
        assert_eq!(theta, Array1::from_vec(vec![0.4, -0.2]));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // Bias correction makes the first step lr * g/(|g| + tiny) ≈ lr·sign(g).
        for &g in &[0.003, 5.0, -120.0] {
            let mut p = MlpParams::from_layers(
                vec![arr2(&[[1.0]])],
                vec![Array1::from_vec(vec![0.0])],
            )
            .unwrap();
            let mut theta = Array1::zeros(1);
            let mut state = AdamState::new(&p, 1, 1e-3);
            let mut grads = Gradients::zeros_like(&p);
            grads.weights[0][[0, 0]] = g;
            adam_step(&mut p, &mut theta, &grads, Array1::zeros(1).view(), &mut state).unwrap();
            let step = 1.0 - p.weight(0)[[0, 0]];
            assert_relative_eq!(step, 1e-3 * g.signum(), max_relative = 1e-4);
        }
    }

    #[test]
    fn adam_constant_gradient_step_converges_to_sign() {
        let mut p = MlpParams::from_layers(
            vec![arr2(&[[1.0]])],
            vec![Array1::from_vec(vec![0.0])],
        )
        .unwrap();
        let mut theta = Array1::zeros(1);
        let mut state = AdamState::new(&p, 1, 1e-3);
        let mut grads = Gradients::zeros_like(&p);
        let g = 0.37;
        grads.weights[0][[0, 0]] = g;
        let mut prev = p.weight(0)[[0, 0]];
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut p, &mut theta, &grads, Array1::zeros(1).view(), &mut state).unwrap();
            last_step = prev - p.weight(0)[[0, 0]];
            prev = p.weight(0)[[0, 0]];
        }
        let expected = 1e-3 * g / (g.abs() + state.epsilon);
        assert_relative_eq!(last_step, expected, max_relative = 1e-6);
    }

    #[test]
    fn adam_gradient_scaling_preserves_sign_pattern() {
        let p0 = MlpParams::init(&[3, 4, 1], 21).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut grads = Gradients::zeros_like(&p0);
        for l in 0..p0.num_layers() {
            for v in grads.weights[l].iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in grads.biases[l].iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let run = |scale: f64| {
            let mut p = p0.clone();
            let mut theta = Array1::zeros(1);
            let mut state = AdamState::new(&p, 1, 1e-3);
            let mut g = grads.clone();
            for l in 0..p.num_layers() {
                g.weights[l] *= scale;
                g.biases[l] *= scale;
            }
            adam_step(&mut p, &mut theta, &g, Array1::zeros(1).view(), &mut state).unwrap();
            let mut signs = Vec::new();
            for l in 0..p.num_layers() {
                for (after, before) in p.weights[l].iter().zip(p0.weights[l].iter()) {
                    signs.push((after - before).signum());
                }
            }
            signs
        };
        assert_eq!(run(1.0), run(437.5));
        assert_eq!(run(1.0), run(1e-4));
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = MlpParams::init(&[2, 2, 1], 0).unwrap();
        let mut theta = Array1::zeros(1);
        let mut state = AdamState::new(&p, 1, 1e-3);
        let mut grads = Gradients::zeros_like(&p);
        grads.weights[0][[0, 0]] = f64::NAN;
        let r = adam_step(&mut p, &mut theta, &grads, Array1::zeros(1).view(), &mut state);
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = || {
            let mut p = MlpParams::init(&[2, 5, 1], 99).unwrap();
            let mut theta = Array1::from_vec(vec![0.1, -0.1]);
            let mut state = AdamState::new(&p, 2, 1e-2);
            let mut rng = ChaCha12Rng::seed_from_u64(4);
            for _ in 0..50 {
                let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let (out, cache) = p.forward(&u).unwrap();
                let grads = p.backward(&cache, 2.0 * out).unwrap();
                let tg = Array1::from_vec(vec![0.01, -0.02]);
                adam_step(&mut p, &mut theta, &grads, tg.view(), &mut state).unwrap();
            }
            (p, theta)
        };
        let (p1, t1) = run();
        let (p2, t2) = run();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn params_json_round_trip() {
        let p = MlpParams::init(&[4, 20, 20, 1], 31).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: MlpParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn params_json_rejects_bad_shapes() {
        let doc = r#"{"widths":[2,3,1],"weights":[[1,2,3],[1,2,3]],"biases":[[0,0,0],[0]]}"#;
        assert!(serde_json::from_str::<MlpParams>(doc).is_err());
    }
}
