//! Neural ensemblers with base-model dropout.
//!
//! Two modes share one input convention: for every class `c` the network sees
//! the length-`M` vector `z^(c)` of all models' outputs for that class, so the
//! parameter count never depends on the number of classes.
//!
//! - **Stacking**: one MLP maps `z^(c)` to a logit; logits are soft-maxed over
//!   classes. For regression the single output is the prediction.
//! - **Model averaging**: a shared embedding MLP maps each `z^(c)` to `H`
//!   features, the embeddings are summed over classes, and a one-layer head maps
//!   the sum to `M` unnormalized weights `f`. Predictions are the convex
//!   combination `sum_m theta_m z_m` with `theta = softmax(f)`.
//!
//! During training a dropout mask `r` zeroes whole base models: inputs become
//! `(r * z) / gamma`, and in averaging mode dropped models also receive exactly
//! zero weight, `theta_m = r_m exp(f_m) / sum r exp(f)`. Inference uses the raw
//! inputs with no mask.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelVector, MetaDataset, PredictionCube, Split};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::clamp_prob;
use crate::nn::{
    adam_step, init_dense_net, softmax_in_place, AdamConfig, AdamState, DenseNet, GradientBundle, Matrix, Trace,
};
use crate::synth::{generate_preferred_model, SyntheticSpec};

/// Attempts at drawing a mask with at least one retained model before one is forced.
pub const MASK_RESAMPLE_LIMIT: usize = 100;

/// Rows evaluated per chunk at inference time.
const INFERENCE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Stacking,
    ModelAveraging,
}

/// How often a fresh dropout mask is drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskGranularity {
    /// One mask shared by every instance of a training step.
    #[default]
    PerStep,
    /// An independent mask for every instance in the batch.
    PerInstance,
}

/// Neural ensembler hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NEConfig {
    pub mode: Mode,
    /// Probability of keeping a base model during training (`1 - dropout rate`).
    pub retain_prob: f64,
    pub layers: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mask_granularity: MaskGranularity,
}

impl Default for NEConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ModelAveraging,
            retain_prob: 0.25,
            layers: 4,
            hidden_dim: 32,
            steps: 10_000,
            batch_size: 2048,
            learning_rate: 1e-3,
            seed: 0,
            mask_granularity: MaskGranularity::PerStep,
        }
    }
}

impl NEConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        1.0 - self.retain_prob
    }

    pub fn with_dropout_rate(mut self, rate: f64) -> Self {
        self.retain_prob = 1.0 - rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.retain_prob > 0.0 && self.retain_prob <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "retain probability {} outside (0, 1]",
                self.retain_prob
            )));
        }
        if self.layers == 0 || self.hidden_dim == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "layers, hidden_dim, steps and batch_size must all be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Layer dims of every network for `n_models` base models.
    ///
    /// Stacking uses `[M, H x (L-1), 1]`. Averaging uses an embedding network
    /// `[M, H x max(L-1, 1)]` followed by a one-layer head `[H, M]`.
    pub fn architecture(&self, n_models: usize) -> Vec<Vec<usize>> {
        let h = self.hidden_dim;
        match self.mode {
            Mode::Stacking => {
                let mut dims = vec![n_models];
                dims.extend(core::iter::repeat(h).take(self.layers - 1));
                dims.push(1);
                vec![dims]
            }
            Mode::ModelAveraging => {
                let mut embed = vec![n_models];
                embed.extend(core::iter::repeat(h).take((self.layers - 1).max(1)));
                vec![embed, vec![h, n_models]]
            }
        }
    }
}

/// Exact number of scalar parameters; independent of the class count.
pub fn param_count(config: &NEConfig, n_models: usize) -> usize {
    config
        .architecture(n_models)
        .iter()
        .map(|dims| dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>())
        .sum()
}

/// Network parameters of a neural ensembler.
#[derive(Debug, Clone, PartialEq)]
pub enum NEParams {
    Stacking { net: DenseNet },
    ModelAveraging { embed: DenseNet, head: DenseNet },
}

/// Gradients shaped like [`NEParams`].
#[derive(Debug, Clone, PartialEq)]
pub enum NEGradients {
    Stacking {
        net: GradientBundle,
    },
    ModelAveraging {
        embed: GradientBundle,
        head: GradientBundle,
    },
}

impl NEGradients {
    fn zeros_for(params: &NEParams) -> Self {
        match params {
            NEParams::Stacking { net } => Self::Stacking {
                net: GradientBundle::zeros_for(net),
            },
            NEParams::ModelAveraging { embed, head } => Self::ModelAveraging {
                embed: GradientBundle::zeros_for(embed),
                head: GradientBundle::zeros_for(head),
            },
        }
    }

    /// All gradients concatenated in [`NEParams::flat_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Self::Stacking { net } => net.as_slice().to_vec(),
            Self::ModelAveraging { embed, head } => {
                let mut v = embed.as_slice().to_vec();
                v.extend_from_slice(head.as_slice());
                v
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Self::Stacking { net } => net.is_finite(),
            Self::ModelAveraging { embed, head } => embed.is_finite() && head.is_finite(),
        }
    }
}

impl NEParams {
    /// Randomly initialized networks for `n_models` base models.
    pub fn init(config: &NEConfig, n_models: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_models == 0 {
            return Err(Error::InvalidConfig("at least one base model is required".into()));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let arch = config.architecture(n_models);
        Ok(match config.mode {
            Mode::Stacking => Self::Stacking {
                net: init_dense_net(&arch[0], seeds.next_u64())?,
            },
            Mode::ModelAveraging => Self::ModelAveraging {
                embed: init_dense_net(&arch[0], seeds.next_u64())?,
                head: init_dense_net(&arch[1], seeds.next_u64())?,
            },
        })
    }

    /// Assembles averaging-mode parameters from explicit networks.
    pub fn model_averaging(embed: DenseNet, head: DenseNet) -> Result<Self> {
        if embed.output_dim() != head.input_dim() || head.output_dim() != embed.input_dim() {
            return Err(Error::Shape(format!(
                "embedding {:?} and head {:?} do not chain",
                embed.dims(),
                head.dims()
            )));
        }
        Ok(Self::ModelAveraging { embed, head })
    }

    /// Assembles stacking-mode parameters from an explicit network.
    pub fn stacking(net: DenseNet) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "stacking network must output one logit, dims {:?}",
                net.dims()
            )));
        }
        Ok(Self::Stacking { net })
    }

    pub fn mode(&self) -> Mode {
        match self {
            Self::Stacking { .. } => Mode::Stacking,
            Self::ModelAveraging { .. } => Mode::ModelAveraging,
        }
    }

    pub fn n_models(&self) -> usize {
        match self {
            Self::Stacking { net } => net.input_dim(),
            Self::ModelAveraging { embed, .. } => embed.input_dim(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Stacking { net } => net.n_params(),
            Self::ModelAveraging { embed, head } => embed.n_params() + head.n_params(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Self::Stacking { net } => net.params().to_vec(),
            Self::ModelAveraging { embed, head } => {
                let mut v = embed.params().to_vec();
                v.extend_from_slice(head.params());
                v
            }
        }
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.n_params()
            )));
        }
        match self {
            Self::Stacking { net } => net.params_mut().copy_from_slice(values),
            Self::ModelAveraging { embed, head } => {
                let (a, b) = values.split_at(embed.n_params());
                embed.params_mut().copy_from_slice(a);
                head.params_mut().copy_from_slice(b);
            }
        }
        Ok(())
    }
}

/// Which base models are kept in one training forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropMask(Vec<bool>);

impl DropMask {
    /// Rejects masks that drop every model.
    pub fn new(retained: Vec<bool>) -> Result<Self> {
        if !retained.iter().any(|&r| r) {
            return Err(Error::InvalidInput(
                "a dropout mask must retain at least one model".into(),
            ));
        }
        Ok(Self(retained))
    }

    pub fn all(n_models: usize) -> Self {
        Self(vec![true; n_models])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_retained(&self, model: usize) -> bool {
        self.0[model]
    }

    pub fn retained_count(&self) -> usize {
        self.0.iter().filter(|&&r| r).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

fn bernoulli_mask<R: Rng + ?Sized>(n_models: usize, retain_prob: f64, rng: &mut R) -> Vec<bool> {
    (0..n_models).map(|_| rng.random::<f64>() < retain_prob).collect()
}

/// Draws `r_m ~ Bernoulli(retain_prob)` independently. An all-zero draw is
/// retried up to [`MASK_RESAMPLE_LIMIT`] times, after which one uniformly chosen
/// model is forced on.
pub fn sample_mask<R: Rng + ?Sized>(n_models: usize, retain_prob: f64, rng: &mut R) -> DropMask {
    for _ in 0..MASK_RESAMPLE_LIMIT {
        let r = bernoulli_mask(n_models, retain_prob, rng);
        if r.iter().any(|&v| v) {
            return DropMask(r);
        }
    }
    let mut r = vec![false; n_models];
    r[rng.random_range(0..n_models)] = true;
    DropMask(r)
}

/// Dropout applied to one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Masking<'a> {
    /// Inference: raw inputs, every model retained.
    None,
    /// One mask for every row.
    Shared(&'a DropMask, f64),
    /// One mask per row.
    PerRow(&'a [DropMask], f64),
}

impl<'a> Masking<'a> {
    fn for_row(&self, b: usize) -> Option<(&'a DropMask, f64)> {
        match *self {
            Masking::None => None,
            Masking::Shared(mask, gamma) => Some((mask, gamma)),
            Masking::PerRow(masks, gamma) => Some((&masks[b], gamma)),
        }
    }

    fn check(&self, rows: usize, n_models: usize) -> Result<()> {
        let masks: &[DropMask] = match self {
            Masking::None => return Ok(()),
            Masking::Shared(mask, _) => core::slice::from_ref(*mask),
            Masking::PerRow(masks, _) => {
                if masks.len() != rows {
                    return Err(Error::Shape(format!("{} masks for {rows} rows", masks.len())));
                }
                masks
            }
        };
        let gamma = match self {
            Masking::Shared(_, g) | Masking::PerRow(_, g) => *g,
            Masking::None => 1.0,
        };
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "retain probability {gamma} outside (0, 1]"
            )));
        }
        for mask in masks {
            if mask.len() != n_models {
                return Err(Error::Shape(format!(
                    "mask of length {} for {n_models} models",
                    mask.len()
                )));
            }
            if mask.retained_count() == 0 {
                return Err(Error::InvalidInput("dropout mask retains no model".into()));
            }
        }
        Ok(())
    }
}

/// Network inputs for `rows`: one row per (instance, class), holding every
/// model's output for that class, masked and scaled when training.
fn class_inputs(cube: &PredictionCube, rows: &[usize], masking: Masking<'_>) -> Result<Matrix> {
    let (m, c) = (cube.n_models(), cube.n_classes());
    let mut input = Matrix::zeros(rows.len() * c, m);
    for (b, &i) in rows.iter().enumerate() {
        let block = cube.instance(i);
        let mask = masking.for_row(b);
        for cls in 0..c {
            let out = input.row_mut(b * c + cls);
            for (k, o) in out.iter_mut().enumerate() {
                let z = block[k * c + cls];
                *o = match mask {
                    None => z,
                    Some((r, gamma)) => {
                        if r.is_retained(k) {
                            z / gamma
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
    }
    Ok(input)
}

/// Everything a batch forward pass produces, kept for the backward pass.
enum BatchState {
    Stacking {
        trace: Trace,
        /// `B x C`: class probabilities, or `B x 1` regression outputs.
        outputs: Matrix,
    },
    ModelAveraging {
        embed_trace: Trace,
        head_trace: Trace,
        /// `B x M` combination weights.
        theta: Matrix,
        /// `B x C` combined predictions.
        outputs: Matrix,
    },
}

impl BatchState {
    fn outputs(&self) -> &Matrix {
        match self {
            BatchState::Stacking { outputs, .. } | BatchState::ModelAveraging { outputs, .. } => outputs,
        }
    }
}

fn masked_softmax(f: &[f64], mask: Option<&DropMask>, out: &mut [f64]) {
    match mask {
        None => {
            out.copy_from_slice(f);
            softmax_in_place(out);
        }
        Some(r) => {
            let max = f
                .iter()
                .enumerate()
                .filter(|(k, _)| r.is_retained(*k))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, o) in out.iter_mut().enumerate() {
                *o = if r.is_retained(k) { math::exp(f[k] - max) } else { 0.0 };
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
    }
}

fn forward_batch(params: &NEParams, cube: &PredictionCube, rows: &[usize], masking: Masking<'_>) -> Result<BatchState> {
    let (m, c) = (cube.n_models(), cube.n_classes());
    if m != params.n_models() {
        return Err(Error::Shape(format!(
            "cube has {m} models, ensembler was built for {}",
            params.n_models()
        )));
    }
    masking.check(rows.len(), m)?;
    let input = class_inputs(cube, rows, masking)?;
    let b_len = rows.len();
    match params {
        NEParams::Stacking { net } => {
            let trace = net.forward_batch(input)?;
            let logits = trace.output();
            let mut outputs = Matrix::from_vec(b_len, c, logits.as_slice().to_vec())?;
            if c > 1 {
                for b in 0..b_len {
                    softmax_in_place(outputs.row_mut(b));
                }
            }
            Ok(BatchState::Stacking { trace, outputs })
        }
        NEParams::ModelAveraging { embed, head } => {
            let embed_trace = embed.forward_batch(input)?;
            let h = embed.output_dim();
            let emb = embed_trace.output();
            let mut summed = Matrix::zeros(b_len, h);
            for b in 0..b_len {
                let s = summed.row_mut(b);
                for cls in 0..c {
                    for (acc, v) in s.iter_mut().zip(emb.row(b * c + cls)) {
                        *acc += v;
                    }
                }
            }
            let head_trace = head.forward_batch(summed)?;
            let f = head_trace.output();
            let mut theta = Matrix::zeros(b_len, m);
            let mut outputs = Matrix::zeros(b_len, c);
            for (b, &i) in rows.iter().enumerate() {
                let mask = masking.for_row(b).map(|(r, _)| r);
                masked_softmax(f.row(b), mask, theta.row_mut(b));
                let block = cube.instance(i);
                let out = outputs.row_mut(b);
                for (k, &w) in theta.row(b).iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, z) in out.iter_mut().zip(&block[k * c..(k + 1) * c]) {
                        *o += w * z;
                    }
                }
            }
            Ok(BatchState::ModelAveraging {
                embed_trace,
                head_trace,
                theta,
                outputs,
            })
        }
    }
}

/// Mean loss of a batch and its gradients with respect to every parameter.
///
/// Classification uses the clamped NLL, regression the squared error
/// (unit-variance Gaussian NLL up to a constant).
fn loss_and_backward(
    params: &NEParams,
    cube: &PredictionCube,
    labels: &LabelVector,
    rows: &[usize],
    state: &BatchState,
) -> Result<(f64, NEGradients)> {
    let (m, c) = (cube.n_models(), cube.n_classes());
    let b_len = rows.len();
    let inv_b = 1.0 / b_len as f64;
    let outputs = state.outputs();
    let mut loss = 0.0;
    // d loss / d output, B x C
    let mut d_out = Matrix::zeros(b_len, c);
    match labels {
        LabelVector::Classes(ys) => {
            for (b, &i) in rows.iter().enumerate() {
                let y = ys[i];
                let p = outputs.get(b, y);
                let pc = clamp_prob(p);
                loss -= math::ln(pc);
                if pc == p {
                    d_out.set(b, y, -inv_b / p);
                }
            }
        }
        LabelVector::Values(ys) => {
            for (b, &i) in rows.iter().enumerate() {
                let r = outputs.get(b, 0) - ys[i];
                loss += r * r;
                d_out.set(b, 0, 2.0 * r * inv_b);
            }
        }
    }
    loss *= inv_b;

    let mut grads = NEGradients::zeros_for(params);
    match (params, state, &mut grads) {
        (NEParams::Stacking { net }, BatchState::Stacking { trace, outputs }, NEGradients::Stacking { net: g }) => {
            let mut d_logits = Matrix::zeros(b_len * c, 1);
            for b in 0..b_len {
                let d = d_out.row(b);
                if c > 1 {
                    // softmax Jacobian: dL/dl_j = p_j (dL/dp_j - sum_k p_k dL/dp_k)
                    let p = outputs.row(b);
                    let mean: f64 = p.iter().zip(d).map(|(a, g)| a * g).sum();
                    for cls in 0..c {
                        d_logits.set(b * c + cls, 0, p[cls] * (d[cls] - mean));
                    }
                } else {
                    d_logits.set(b, 0, d[0]);
                }
            }
            net.accumulate_gradients(trace, &d_logits, g, false)?;
        }
        (
            NEParams::ModelAveraging { embed, head },
            BatchState::ModelAveraging {
                embed_trace,
                head_trace,
                theta,
                ..
            },
            NEGradients::ModelAveraging { embed: ge, head: gh },
        ) => {
            let mut d_f = Matrix::zeros(b_len, m);
            for (b, &i) in rows.iter().enumerate() {
                let block = cube.instance(i);
                let d = d_out.row(b);
                let th = theta.row(b);
                let d_theta: Vec<f64> = (0..m)
                    .map(|k| block[k * c..(k + 1) * c].iter().zip(d).map(|(z, g)| z * g).sum())
                    .collect();
                let mean: f64 = th.iter().zip(&d_theta).map(|(a, g)| a * g).sum();
                for (k, df) in d_f.row_mut(b).iter_mut().enumerate() {
                    *df = th[k] * (d_theta[k] - mean);
                }
            }
            let d_sum = head
                .accumulate_gradients(head_trace, &d_f, gh, true)?
                .expect("input gradient requested");
            let h = embed.output_dim();
            let mut d_emb = Matrix::zeros(b_len * c, h);
            for b in 0..b_len {
                for cls in 0..c {
                    d_emb.row_mut(b * c + cls).copy_from_slice(d_sum.row(b));
                }
            }
            embed.accumulate_gradients(embed_trace, &d_emb, ge, false)?;
        }
        _ => unreachable!("batch state always matches the parameter mode"),
    }
    Ok((loss, grads))
}

/// Training loss of `rows` under `masking`, with exact gradients.
pub fn batch_loss_and_grad(
    params: &NEParams,
    split: &Split,
    rows: &[usize],
    masking: Masking<'_>,
) -> Result<(f64, NEGradients)> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(&i) = rows.iter().find(|&&i| i >= split.n_instances()) {
        return Err(Error::InvalidInput(format!("row {i} outside the split")));
    }
    let state = forward_batch(params, &split.predictions, rows, masking)?;
    loss_and_backward(params, &split.predictions, &split.labels, rows, &state)
}

fn single_instance(z: &[f64], n_models: usize, n_classes: usize) -> Result<PredictionCube> {
    if n_classes == 0 || z.len() != n_models * n_classes {
        return Err(Error::Shape(format!(
            "instance slice of length {} for {n_models} models and {n_classes} classes",
            z.len()
        )));
    }
    PredictionCube::new(1, n_models, n_classes, z.to_vec())
}

fn masking_for<'a>(mask: Option<&'a DropMask>, retain_prob: f64) -> Masking<'a> {
    match mask {
        Some(r) => Masking::Shared(r, retain_prob),
        None => Masking::None,
    }
}

/// Stacking output for one instance. `z` is the `M x C` block (model-major).
/// Returns class probabilities for `C > 1`, or the scalar prediction for `C = 1`.
pub fn forward_stacking(
    params: &NEParams,
    z: &[f64],
    n_classes: usize,
    mask: Option<&DropMask>,
    retain_prob: f64,
) -> Result<Vec<f64>> {
    if params.mode() != Mode::Stacking {
        return Err(Error::InvalidInput("parameters are not in stacking mode".into()));
    }
    let cube = single_instance(z, params.n_models(), n_classes)?;
    let state = forward_batch(params, &cube, &[0], masking_for(mask, retain_prob))?;
    Ok(state.outputs().row(0).to_vec())
}

/// Model-averaging weights `theta` for one instance. Masked models get exactly zero.
pub fn forward_ma_weights(
    params: &NEParams,
    z: &[f64],
    n_classes: usize,
    mask: Option<&DropMask>,
    retain_prob: f64,
) -> Result<Vec<f64>> {
    if params.mode() != Mode::ModelAveraging {
        return Err(Error::InvalidInput("parameters are not in model-averaging mode".into()));
    }
    let cube = single_instance(z, params.n_models(), n_classes)?;
    match forward_batch(params, &cube, &[0], masking_for(mask, retain_prob))? {
        BatchState::ModelAveraging { theta, .. } => Ok(theta.row(0).to_vec()),
        BatchState::Stacking { .. } => unreachable!(),
    }
}

fn chunked<F>(cube: &PredictionCube, cols: usize, mut per_chunk: F) -> Result<Matrix>
where
    F: FnMut(&[usize]) -> Result<Matrix>,
{
    let n = cube.n_instances();
    let mut out = Vec::with_capacity(n * cols);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(INFERENCE_CHUNK) {
        out.extend_from_slice(per_chunk(chunk)?.as_slice());
    }
    Matrix::from_vec(n, cols, out)
}

/// Inference predictions for every instance: `N x C` class probabilities, or
/// `N x 1` regression outputs. No mask and no input scaling.
pub fn predict(params: &NEParams, cube: &PredictionCube) -> Result<Matrix> {
    chunked(cube, cube.n_classes(), |rows| {
        forward_batch(params, cube, rows, Masking::None).map(|s| match s {
            BatchState::Stacking { outputs, .. } | BatchState::ModelAveraging { outputs, .. } => outputs,
        })
    })
}

/// Model-averaging predictions `sum_m theta_m z_m` with inference-time weights.
pub fn predict_ma(params: &NEParams, cube: &PredictionCube) -> Result<Matrix> {
    if params.mode() != Mode::ModelAveraging {
        return Err(Error::InvalidInput("parameters are not in model-averaging mode".into()));
    }
    predict(params, cube)
}

/// Inference-time weights `theta`, `N x M`.
pub fn inference_weights(params: &NEParams, cube: &PredictionCube) -> Result<Matrix> {
    if params.mode() != Mode::ModelAveraging {
        return Err(Error::InvalidInput("parameters are not in model-averaging mode".into()));
    }
    chunked(cube, cube.n_models(), |rows| {
        forward_batch(params, cube, rows, Masking::None).map(|s| match s {
            BatchState::ModelAveraging { theta, .. } => theta,
            BatchState::Stacking { .. } => unreachable!(),
        })
    })
}

/// Mean validation loss (clamped NLL or MSE) at inference time.
pub fn evaluation_loss(params: &NEParams, split: &Split) -> Result<f64> {
    let preds = predict(params, &split.predictions)?;
    let n = split.n_instances() as f64;
    Ok(match &split.labels {
        LabelVector::Classes(ys) => {
            ys.iter()
                .enumerate()
                .map(|(i, &y)| -math::ln(clamp_prob(preds.get(i, y))))
                .sum::<f64>()
                / n
        }
        LabelVector::Values(ys) => {
            ys.iter()
                .enumerate()
                .map(|(i, y)| (preds.get(i, 0) - y) * (preds.get(i, 0) - y))
                .sum::<f64>()
                / n
        }
    })
}

/// Trained parameters and the per-step training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NEParams,
    pub loss_trace: Vec<f64>,
}

/// Fits a neural ensembler on the validation split of `ds`.
pub fn train(ds: &MetaDataset, config: &NEConfig) -> Result<TrainOutcome> {
    train_on_split(ds.validation(), config)
}

/// Runs `config.steps` Adam updates. Each step draws a batch uniformly with
/// replacement, draws dropout masks, and backpropagates the masked, scaled
/// forward pass. Fully determined by `config.seed`.
pub fn train_on_split(val: &Split, config: &NEConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = val.n_instances();
    if n == 0 {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let m = val.n_models();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = NEParams::init(config, m, rng.next_u64())?;
    let adam = AdamConfig::with_learning_rate(config.learning_rate);
    let mut states: Vec<AdamState> = match &params {
        NEParams::Stacking { net } => vec![AdamState::for_net(net, adam)?],
        NEParams::ModelAveraging { embed, head } => {
            vec![AdamState::for_net(embed, adam)?, AdamState::for_net(head, adam)?]
        }
    };
    let batch = config.batch_size.min(n);
    let gamma = config.retain_prob;
    let mut rows = vec![0usize; batch];
    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        rows.iter_mut().for_each(|r| *r = rng.random_range(0..n));
        let (loss, grads) = match config.mask_granularity {
            MaskGranularity::PerStep => {
                let mask = sample_mask(m, gamma, &mut rng);
                batch_loss_and_grad(&params, val, &rows, Masking::Shared(&mask, gamma))
            }
            MaskGranularity::PerInstance => {
                let masks: Vec<DropMask> = (0..batch).map(|_| sample_mask(m, gamma, &mut rng)).collect();
                batch_loss_and_grad(&params, val, &rows, Masking::PerRow(&masks, gamma))
            }
        }
        .map_err(|e| match e {
            Error::NonFinite(what) => Error::Numeric { step, detail: what },
            other => other,
        })?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric {
                step,
                detail: format!("training loss {loss}"),
            });
        }
        loss_trace.push(loss);
        match (&mut params, &grads) {
            (NEParams::Stacking { net }, NEGradients::Stacking { net: g }) => adam_step(net, g, &mut states[0])?,
            (NEParams::ModelAveraging { embed, head }, NEGradients::ModelAveraging { embed: ge, head: gh }) => {
                adam_step(embed, ge, &mut states[0])?;
                adam_step(head, gh, &mut states[1])?;
            }
            _ => unreachable!(),
        }
    }
    Ok(TrainOutcome { params, loss_trace })
}

/// Monte-Carlo estimate of the ambiguity `E[sum_m theta_m (z_m - zbar)^2]`
/// under raw Bernoulli dropout, with `zbar = sum_m r_m theta_m z_m`.
///
/// Predictions come from the standardized preferred-model generator and the
/// weights are squared sample correlations with the target, normalized to sum
/// to one. As the preferred model's correlation approaches one the estimate
/// approaches `1 - retain_prob`. Masks may drop every model here.
pub fn diversity_limit_oracle(
    retain_prob: f64,
    correlation: f64,
    n_models: usize,
    n_samples: usize,
    n_masks: usize,
    seed: u64,
) -> Result<f64> {
    if !(retain_prob > 0.0 && retain_prob <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "retain probability {retain_prob} outside (0, 1]"
        )));
    }
    if n_masks == 0 {
        return Err(Error::InvalidConfig("at least one mask per sample is required".into()));
    }
    let ds = generate_preferred_model(&SyntheticSpec::preferred_model(n_models, correlation, n_samples, seed))?;
    let split = ds.validation();
    let y = split.labels.values().expect("regression labels");
    let cube = &split.predictions;
    let n = n_samples as f64;
    // columns are standardized, so the sample correlation is the mean product
    let rho2: Vec<f64> = (0..n_models)
        .map(|k| {
            let r = (0..n_samples).map(|i| cube.get(i, k, 0) * y[i]).sum::<f64>() / n;
            r * r
        })
        .collect();
    let total: f64 = rho2.iter().sum();
    let theta: Vec<f64> = if total > 0.0 {
        rho2.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / n_models as f64; n_models]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D1CE_0F0F_A11A);
    let mut acc = 0.0;
    for i in 0..n_samples {
        let z = cube.instance(i);
        for _ in 0..n_masks {
            let r = bernoulli_mask(n_models, retain_prob, &mut rng);
            let zbar: f64 = (0..n_models).filter(|&k| r[k]).map(|k| theta[k] * z[k]).sum();
            acc += (0..n_models)
                .map(|k| theta[k] * (z[k] - zbar) * (z[k] - zbar))
                .sum::<f64>();
        }
    }
    Ok(acc / (n * n_masks as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::synth::{generate, SyntheticSpec};

    fn ones_ma_net() -> NEParams {
        // M = 2, H = 1, all weights 1, biases 0
        let embed = DenseNet::from_layers(
            &[2, 1, 1, 1],
            &[vec![1.0, 1.0], vec![1.0], vec![1.0]],
            &[vec![0.0], vec![0.0], vec![0.0]],
        )
        .unwrap();
        let head = DenseNet::from_layers(&[1, 2], &[vec![1.0, 1.0]], &[vec![0.0, 0.0]]).unwrap();
        NEParams::model_averaging(embed, head).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NEConfig::default().validate().is_ok());
        assert!(NEConfig::default().with_dropout_rate(1.0).validate().is_err());
        let c = NEConfig::default().with_dropout_rate(0.75);
        assert_eq!(c.retain_prob, 0.25);
        assert!(NEConfig {
            layers: 0,
            ..NEConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn param_count_golden_values() {
        let stack = NEConfig::new(Mode::Stacking);
        assert_eq!(param_count(&stack, 10), 2497);
        let ma = NEConfig {
            hidden_dim: 1,
            ..NEConfig::new(Mode::ModelAveraging)
        };
        assert_eq!(param_count(&ma, 2), 11);
        let params = NEParams::init(&stack, 10, 0).unwrap();
        assert_eq!(params.n_params(), 2497);
    }

    #[test]
    fn mask_with_full_retention_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_mask(7, 1.0, &mut rng), DropMask::all(7));
        }
    }

    #[test]
    fn masks_always_retain_a_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert!(sample_mask(3, 0.01, &mut rng).retained_count() >= 1);
        }
        assert!(DropMask::new(vec![false, false]).is_err());
    }

    #[test]
    fn mask_retention_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let total: usize = (0..10_000)
            .map(|_| sample_mask(20, 0.25, &mut rng).retained_count())
            .sum();
        let mean = total as f64 / 10_000.0;
        assert!((mean - 5.0).abs() <= 0.2, "{mean}");
    }

    #[test]
    fn stacking_zero_head_gives_uniform_classes() {
        let cfg = NEConfig {
            layers: 3,
            hidden_dim: 4,
            ..NEConfig::new(Mode::Stacking)
        };
        let mut params = NEParams::init(&cfg, 3, 5).unwrap();
        if let NEParams::Stacking { net } = &mut params {
            let last = net.n_layers() - 1;
            net.weight_mut(last).fill(0.0);
            net.bias_mut(last).fill(0.0);
        }
        let z = [0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.3, 0.3, 0.4];
        let p = forward_stacking(&params, &z, 3, None, 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn stacking_identical_class_columns_tie() {
        let cfg = NEConfig {
            layers: 2,
            hidden_dim: 5,
            ..NEConfig::new(Mode::Stacking)
        };
        let params = NEParams::init(&cfg, 3, 9).unwrap();
        let z = [0.5, 0.5, 0.7, 0.7, 0.1, 0.1];
        assert_eq!(forward_stacking(&params, &z, 2, None, 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn stacking_hand_example() {
        let net = DenseNet::from_layers(&[2, 1], &[vec![1.0, 1.0]], &[vec![0.0]]).unwrap();
        let params = NEParams::stacking(net).unwrap();
        // model 0: [0.8, 0.2], model 1: [0.6, 0.4]
        let p = forward_stacking(&params, &[0.8, 0.2, 0.6, 0.4], 2, None, 1.0).unwrap();
        let expected0 = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((p[0] - expected0).abs() < 1e-12);
        assert!((p[0] - 0.6900).abs() < 5e-5 && (p[1] - 0.3100).abs() < 5e-5);
    }

    #[test]
    fn stacking_training_mask_scales_inputs() {
        let net = DenseNet::from_layers(&[2, 1], &[vec![1.0, 1.0]], &[vec![0.0]]).unwrap();
        let params = NEParams::stacking(net).unwrap();
        let mask = DropMask::new(vec![true, false]).unwrap();
        // regression: output = z_0 / gamma
        let out = forward_stacking(&params, &[0.3, 0.9], 1, Some(&mask), 0.5).unwrap();
        assert_eq!(out, vec![0.6]);
    }

    #[test]
    fn ma_hand_example() {
        let params = ones_ma_net();
        let theta = forward_ma_weights(&params, &[1.0, 2.0], 1, None, 1.0).unwrap();
        assert_eq!(theta, vec![0.5, 0.5]);
    }

    #[test]
    fn ma_zero_head_is_uniform_over_retained() {
        let cfg = NEConfig {
            hidden_dim: 4,
            ..NEConfig::new(Mode::ModelAveraging)
        };
        let mut params = NEParams::init(&cfg, 3, 3).unwrap();
        if let NEParams::ModelAveraging { head, .. } = &mut params {
            head.params_mut().fill(0.0);
        }
        let z = [0.2, 0.8, 0.5, 0.5, 0.9, 0.1];
        let theta = forward_ma_weights(&params, &z, 2, None, 1.0).unwrap();
        assert!(theta.iter().all(|&t| (t - 1.0 / 3.0).abs() < 1e-15));
        let mask = DropMask::new(vec![true, false, true]).unwrap();
        let theta = forward_ma_weights(&params, &z, 2, Some(&mask), 0.5).unwrap();
        assert_eq!(theta, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn ma_masked_weights_are_exact_zeros() {
        let cfg = NEConfig {
            hidden_dim: 6,
            ..NEConfig::new(Mode::ModelAveraging)
        };
        let params = NEParams::init(&cfg, 3, 17).unwrap();
        let mask = DropMask::new(vec![true, false, true]).unwrap();
        let theta = forward_ma_weights(&params, &[0.3, 0.7, 0.6, 0.4, 0.1, 0.9], 2, Some(&mask), 0.25).unwrap();
        assert_eq!(theta[1], 0.0);
        assert!((theta[0] + theta[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_ma_combines_rows() {
        let params = ones_ma_net();
        // identical embeddings for both models => theta = [0.5, 0.5]
        let cube = PredictionCube::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = predict_ma(&params, &cube).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);

        let twins = PredictionCube::new(1, 2, 2, vec![0.3, 0.7, 0.3, 0.7]).unwrap();
        let out = predict_ma(&params, &twins).unwrap();
        assert!((out.get(0, 0) - 0.3).abs() < 1e-15 && (out.get(0, 1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn predict_ma_extreme_logits_select_one_model() {
        let mut params = ones_ma_net();
        if let NEParams::ModelAveraging { head, .. } = &mut params {
            head.bias_mut(0).copy_from_slice(&[0.0, 800.0]);
        }
        let cube = PredictionCube::new(1, 2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(predict_ma(&params, &cube).unwrap().as_slice(), &[0.2, 0.8]);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cls = generate(&SyntheticSpec::complementary_experts(3, 3, 12, 1)).unwrap();
        let reg = generate(&SyntheticSpec::preferred_model(3, 0.7, 12, 1)).unwrap();
        for ds in [&cls, &reg] {
            for mode in [Mode::Stacking, Mode::ModelAveraging] {
                let cfg = NEConfig {
                    mode,
                    layers: 3,
                    hidden_dim: 4,
                    ..NEConfig::default()
                };
                let mut params = NEParams::init(&cfg, 3, 8).unwrap();
                // keep pre-activations off the rectifier kink for all-zero inputs
                let shifted: Vec<f64> = params.flat_params().iter().map(|w| w + 0.03).collect();
                params.set_flat_params(&shifted).unwrap();
                let rows = [0, 3, 5, 5, 11];
                let mask = DropMask::new(vec![true, false, true]).unwrap();
                let masking = Masking::Shared(&mask, 0.5);
                let split = ds.validation();
                let (_, grads) = batch_loss_and_grad(&params, split, &rows, masking).unwrap();
                let mut probe = params.clone();
                let numeric = gradcheck::central_differences(
                    |x| {
                        probe.set_flat_params(x).unwrap();
                        batch_loss_and_grad(&probe, split, &rows, masking).unwrap().0
                    },
                    &params.flat_params(),
                    1e-5,
                );
                let cmp = gradcheck::compare(&grads.flatten(), &numeric, 1e-8);
                assert!(cmp.passes(1e-4, 1e-7), "{mode:?}: {cmp:?}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate(&SyntheticSpec::complementary_experts(2, 3, 100, 0)).unwrap();
        let cfg = NEConfig {
            steps: 30,
            batch_size: 32,
            hidden_dim: 8,
            ..NEConfig::default()
        };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_instance_masks_train() {
        let ds = generate(&SyntheticSpec::complementary_experts(3, 3, 100, 0)).unwrap();
        let cfg = NEConfig {
            steps: 20,
            batch_size: 16,
            hidden_dim: 8,
            mask_granularity: MaskGranularity::PerInstance,
            ..NEConfig::default()
        };
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.loss_trace.len(), 20);
    }

    #[test]
    fn oracle_without_dropout_has_no_diversity_at_full_correlation() {
        let a = diversity_limit_oracle(1.0, 1.0, 5, 2000, 1, 0).unwrap();
        assert!(a.abs() < 0.01, "{a}");
    }
}
