//! Minimal dense-network engine.
//!
//! A [`DenseNet`] is a stack of fully connected layers with rectifier
//! activations on every hidden layer and an identity output layer. All
//! parameters live in one flat buffer so that optimizers and finite-difference
//! checks can treat the network as a plain vector; per-layer views are exposed
//! through [`DenseNet::weight`] and [`DenseNet::bias`].
//!
//! Forward passes run over a whole batch ([`Matrix`], one row per example) and
//! record a [`Trace`] of activations; [`DenseNet::backward`] consumes that trace
//! and returns exact gradients summed over the batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    n_in: usize,
    n_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

fn layout_for(dims: &[usize]) -> Result<(Vec<LayerSpan>, usize)> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a dense net needs at least one layer transition, got dims {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dims must be positive, got {dims:?}"
        )));
    }
    let mut spans = Vec::with_capacity(dims.len() - 1);
    let mut offset = 0;
    for pair in dims.windows(2) {
        let (n_in, n_out) = (pair[0], pair[1]);
        spans.push(LayerSpan {
            n_in,
            n_out,
            weight_offset: offset,
            bias_offset: offset + n_in * n_out,
        });
        offset += n_in * n_out + n_out;
    }
    Ok((spans, offset))
}

/// Fully connected network: rectifier on hidden layers, identity on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    spans: Vec<LayerSpan>,
    params: Vec<f64>,
}

/// Builds a network whose weights are drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
/// and whose biases are zero. The result depends only on `dims` and `seed`.
pub fn init_dense_net(dims: &[usize], seed: u64) -> Result<DenseNet> {
    let (spans, n_params) = layout_for(dims)?;
    let mut params = vec![0.0; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for span in &spans {
        let bound = math::sqrt(6.0 / span.n_in as f64);
        for w in &mut params[span.weight_offset..span.bias_offset] {
            *w = (2.0 * rng.random::<f64>() - 1.0) * bound;
        }
    }
    Ok(DenseNet {
        dims: dims.to_vec(),
        spans,
        params,
    })
}

impl DenseNet {
    /// Builds a network from explicit per-layer weights (`out x in`, row-major) and biases.
    pub fn from_layers(dims: &[usize], weights: &[Vec<f64>], biases: &[Vec<f64>]) -> Result<Self> {
        let (spans, n_params) = layout_for(dims)?;
        if weights.len() != spans.len() || biases.len() != spans.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {} weight and {} bias arrays",
                spans.len(),
                weights.len(),
                biases.len()
            )));
        }
        let mut params = Vec::with_capacity(n_params);
        for ((span, w), b) in spans.iter().zip(weights).zip(biases) {
            if w.len() != span.n_in * span.n_out || b.len() != span.n_out {
                return Err(Error::Shape(format!(
                    "layer {}x{} given {} weights and {} biases",
                    span.n_out,
                    span.n_in,
                    w.len(),
                    b.len()
                )));
            }
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        if !math::all_finite(&params) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spans,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.spans.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix of `layer`, `out x in`, row-major.
    pub fn weight(&self, layer: usize) -> &[f64] {
        let s = self.spans[layer];
        &self.params[s.weight_offset..s.bias_offset]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.spans[layer];
        &mut self.params[s.weight_offset..s.bias_offset]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.spans[layer];
        &self.params[s.bias_offset..s.bias_offset + s.n_out]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.spans[layer];
        &mut self.params[s.bias_offset..s.bias_offset + s.n_out]
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Trace)> {
        let trace = self.forward_batch(Matrix::from_vec(1, input.len(), input.to_vec())?)?;
        let out = trace.output().as_slice().to_vec();
        Ok((out, trace))
    }

    /// Evaluates every row of `input`.
    pub fn forward_batch(&self, input: Matrix) -> Result<Trace> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        if !math::all_finite(input.as_slice()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let last = self.spans.len() - 1;
        let mut activations = Vec::with_capacity(self.spans.len() + 1);
        activations.push(input);
        for (l, span) in self.spans.iter().enumerate() {
            let prev = &activations[l];
            let weight = &self.params[span.weight_offset..span.bias_offset];
            let bias = &self.params[span.bias_offset..span.bias_offset + span.n_out];
            let mut out = Matrix::zeros(prev.rows(), span.n_out);
            for r in 0..prev.rows() {
                let x = prev.row(r);
                let y = out.row_mut(r);
                for (o, y_o) in y.iter_mut().enumerate() {
                    let v = bias[o] + dot(&weight[o * span.n_in..(o + 1) * span.n_in], x);
                    *y_o = if l < last && v < 0.0 { 0.0 } else { v };
                }
            }
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Exact gradients of a scalar loss given `d loss / d output` for every row
    /// of the traced batch. Parameter gradients are summed over rows.
    pub fn backward(&self, trace: &Trace, output_gradient: &Matrix) -> Result<(GradientBundle, Matrix)> {
        let mut grads = GradientBundle::zeros_for(self);
        let input_grad = self.accumulate_gradients(trace, output_gradient, &mut grads, true)?;
        Ok((grads, input_grad.expect("input gradient requested")))
    }

    /// Adds this batch's parameter gradients into `grads`. The input gradient is
    /// only computed when `want_input_grad` is set.
    pub fn accumulate_gradients(
        &self,
        trace: &Trace,
        output_gradient: &Matrix,
        grads: &mut GradientBundle,
        want_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        if trace.activations.len() != self.spans.len() + 1 {
            return Err(Error::Shape("trace does not belong to this network".into()));
        }
        if grads.values.len() != self.params.len() {
            return Err(Error::Shape("gradient bundle does not match network".into()));
        }
        let out = trace.output();
        if output_gradient.rows() != out.rows() || output_gradient.cols() != out.cols() {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, network output is {}x{}",
                output_gradient.rows(),
                output_gradient.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut delta = output_gradient.clone();
        for l in (0..self.spans.len()).rev() {
            let span = self.spans[l];
            let input = &trace.activations[l];
            let weight = &self.params[span.weight_offset..span.bias_offset];
            {
                let (gw, gb) = grads.values[span.weight_offset..span.bias_offset + span.n_out]
                    .split_at_mut(span.n_in * span.n_out);
                for r in 0..delta.rows() {
                    let d = delta.row(r);
                    let x = input.row(r);
                    for (o, &d_o) in d.iter().enumerate() {
                        if d_o == 0.0 {
                            continue;
                        }
                        gb[o] += d_o;
                        axpy(d_o, x, &mut gw[o * span.n_in..(o + 1) * span.n_in]);
                    }
                }
            }
            if l == 0 && !want_input_grad {
                return Ok(None);
            }
            let mut prev_delta = Matrix::zeros(delta.rows(), span.n_in);
            for r in 0..delta.rows() {
                let d = delta.row(r);
                let pd = prev_delta.row_mut(r);
                for (o, &d_o) in d.iter().enumerate() {
                    if d_o != 0.0 {
                        axpy(d_o, &weight[o * span.n_in..(o + 1) * span.n_in], pd);
                    }
                }
            }
            if l > 0 {
                // rectifier derivative: zero wherever the hidden activation was clipped
                for (g, &a) in prev_delta.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = prev_delta;
        }
        Ok(Some(delta))
    }
}

/// Activations recorded by a forward pass: the input followed by each layer's output.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("trace always holds the input")
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.activations
    }
}

/// Parameter gradients laid out exactly like the parameters of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    spans: Vec<LayerSpan>,
    values: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_for(net: &DenseNet) -> Self {
        Self {
            spans: net.spans.clone(),
            values: vec![0.0; net.params.len()],
        }
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let s = self.spans[layer];
        &self.values[s.weight_offset..s.bias_offset]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.spans[layer];
        &self.values[s.bias_offset..s.bias_offset + s.n_out]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        math::all_finite(&self.values)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad Adam hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        })
    }

    pub fn for_net(net: &DenseNet, config: AdamConfig) -> Result<Self> {
        Self::new(net.n_params(), config)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update. Nothing is modified if `grads` is not finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "Adam state holds {} parameters, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if !math::all_finite(grads) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = i32::try_from(self.step_count).unwrap_or(i32::MAX);
        let correction1 = 1.0 - math::powi(beta1, t);
        let correction2 = 1.0 - math::powi(beta2, t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (math::sqrt(v_hat) + epsilon);
        }
        Ok(())
    }
}

/// Applies one Adam update to every parameter of `net`.
pub fn adam_step(net: &mut DenseNet, grads: &GradientBundle, state: &mut AdamState) -> Result<()> {
    if grads.spans != net.spans {
        return Err(Error::Shape("gradient bundle does not match network".into()));
    }
    state.step(&mut net.params, &grads.values)
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if !math::all_finite(v) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = math::exp(*x - max);
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Central finite differences for gradient verification.
pub mod gradcheck {
    use alloc::vec::Vec;

    /// Numerical gradient of `f` at `x` with step `h`.
    pub fn central_differences<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = f(&probe);
                probe[i] = orig - h;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Fourth-order numerical gradient: Richardson extrapolation of central
    /// differences at `h` and `h / 2`.
    pub fn extrapolated_differences<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let coarse = central_differences(&mut f, x, h);
        let fine = central_differences(&mut f, x, h / 2.0);
        coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
    }

    /// Outcome of comparing analytic and numerical gradients.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Comparison {
        /// Largest relative error among elements with `|analytic| >= small`.
        pub max_relative_error: f64,
        /// Largest absolute error among elements with `|analytic| < small`.
        pub max_small_abs_error: f64,
    }

    impl Comparison {
        pub fn passes(&self, rel_tol: f64, small_abs_tol: f64) -> bool {
            self.max_relative_error < rel_tol && self.max_small_abs_error <= small_abs_tol
        }
    }

    /// Elements whose analytic value is below `small` in magnitude are compared absolutely.
    pub fn compare(analytic: &[f64], numeric: &[f64], small: f64) -> Comparison {
        assert_eq!(analytic.len(), numeric.len());
        let mut out = Comparison {
            max_relative_error: 0.0,
            max_small_abs_error: 0.0,
        };
        for (&a, &n) in analytic.iter().zip(numeric) {
            let diff = (a - n).abs();
            if a.abs() < small {
                out.max_small_abs_error = out.max_small_abs_error.max(diff);
            } else {
                out.max_relative_error = out.max_relative_error.max(diff / a.abs().max(n.abs()));
            }
        }
        out
    }

    /// Compares `analytic` with extrapolated differences at every step in
    /// `steps`, keeping each element's closest estimate. Large steps can straddle
    /// a rectifier kink and small steps drown in roundoff, but an incorrect
    /// analytic gradient disagrees at every step.
    pub fn compare_multiscale<F>(analytic: &[f64], mut f: F, x: &[f64], steps: &[f64], small: f64) -> Comparison
    where
        F: FnMut(&[f64]) -> f64,
    {
        let estimates: Vec<Vec<f64>> = steps.iter().map(|&h| extrapolated_differences(&mut f, x, h)).collect();
        let best: Vec<f64> = (0..x.len())
            .map(|i| {
                estimates
                    .iter()
                    .map(|e| e[i])
                    .min_by(|p, q| (p - analytic[i]).abs().total_cmp(&(q - analytic[i]).abs()))
                    .unwrap_or(f64::NAN)
            })
            .collect();
        compare(analytic, &best, small)
    }
}
