//! Constant-weight and selection ensemblers.
//!
//! Every fitter reads only the validation [`Split`] it is given. Model quality
//! is measured by NLL for classification and MSE for regression, and all ties
//! go to the lowest model index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelVector, PredictionCube, Split};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::clamp_prob;
use crate::nn::{softmax_in_place, AdamConfig, AdamState, Matrix};

/// Ensemble size used by random, top-N, greedy and quick selection.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 50;

/// Length-`M` simplex of static model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if let Some(m) = weights.iter().position(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("weight {m} is {}", weights[m])));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n_models: usize) -> Self {
        Self(vec![1.0 / n_models as f64; n_models])
    }

    pub fn one_hot(n_models: usize, model: usize) -> Self {
        let mut w = vec![0.0; n_models];
        w[model] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Multiset of picked models; converts to weights by pick frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSelection {
    picks: Vec<usize>,
}

impl ModelSelection {
    pub fn new(picks: Vec<usize>) -> Self {
        Self { picks }
    }

    pub fn picks(&self) -> &[usize] {
        &self.picks
    }

    pub fn contains(&self, model: usize) -> bool {
        self.picks.contains(&model)
    }

    pub fn to_weights(&self, n_models: usize) -> Result<EnsembleWeights> {
        if self.picks.is_empty() {
            return Err(Error::InvalidInput("empty selection".into()));
        }
        let mut w = vec![0.0; n_models];
        for &p in &self.picks {
            if p >= n_models {
                return Err(Error::InvalidInput(format!("pick {p} outside [0, {n_models})")));
            }
            w[p] += 1.0;
        }
        let n = self.picks.len() as f64;
        w.iter_mut().for_each(|v| *v /= n);
        Ok(EnsembleWeights(w))
    }
}

/// `sum_m w_m z_m` for every instance and class.
pub fn predict_static(weights: &EnsembleWeights, cube: &PredictionCube) -> Result<Matrix> {
    let (n, m, c) = (cube.n_instances(), cube.n_models(), cube.n_classes());
    if weights.len() != m {
        return Err(Error::Shape(format!("{} weights for {m} models", weights.len())));
    }
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let row = out.row_mut(i);
        for (k, &w) in weights.as_slice().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, z) in row.iter_mut().zip(cube.model_row(i, k)) {
                *o += w * z;
            }
        }
    }
    Ok(out)
}

/// Per-instance view used for loss evaluation: the true-class probability
/// (classification) or the point prediction (regression) of every model.
struct LossView<'a> {
    relevant: Vec<f64>,
    targets: Option<&'a [f64]>,
    n: usize,
    m: usize,
}

impl<'a> LossView<'a> {
    fn new(val: &'a Split) -> Result<Self> {
        let cube = &val.predictions;
        let (n, m) = (cube.n_instances(), cube.n_models());
        if n == 0 {
            return Err(Error::InvalidInput("validation split is empty".into()));
        }
        let mut relevant = Vec::with_capacity(n * m);
        let targets = match &val.labels {
            LabelVector::Classes(ys) => {
                for (i, &y) in ys.iter().enumerate() {
                    relevant.extend((0..m).map(|k| cube.get(i, k, y)));
                }
                None
            }
            LabelVector::Values(ys) => {
                relevant.extend_from_slice(cube.values());
                Some(&ys[..])
            }
        };
        Ok(Self {
            relevant,
            targets,
            n,
            m,
        })
    }

    #[inline]
    fn z(&self, i: usize, k: usize) -> f64 {
        self.relevant[i * self.m + k]
    }

    /// Loss of per-instance combined values (`sum_k w_k z_k`).
    fn loss_of(&self, combined: impl Iterator<Item = f64>) -> f64 {
        let total: f64 = match self.targets {
            None => combined.map(|p| -math::ln(clamp_prob(p))).sum(),
            Some(ys) => combined.zip(ys).map(|(p, y)| (p - y) * (p - y)).sum(),
        };
        total / self.n as f64
    }

    fn model_loss(&self, k: usize) -> f64 {
        self.loss_of((0..self.n).map(|i| self.z(i, k)))
    }
}

/// Validation loss (NLL or MSE) of each base model.
pub fn model_losses(val: &Split) -> Result<Vec<f64>> {
    let view = LossView::new(val)?;
    Ok((0..view.m).map(|k| view.model_loss(k)).collect())
}

/// Validation loss of a static weighting.
pub fn static_loss(weights: &EnsembleWeights, val: &Split) -> Result<f64> {
    let view = LossView::new(val)?;
    if weights.len() != view.m {
        return Err(Error::Shape(format!("{} weights for {} models", weights.len(), view.m)));
    }
    let w = weights.as_slice();
    Ok(view.loss_of((0..view.n).map(|i| (0..view.m).map(|k| w[k] * view.z(i, k)).sum())))
}

fn ranked_models(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order
}

/// Model with the lowest validation loss.
pub fn single_best(val: &Split) -> Result<usize> {
    let losses = model_losses(val)?;
    Ok(ranked_models(&losses)[0])
}

/// Uniform weights over the `min(n, M)` models with the lowest validation loss.
pub fn top_n(val: &Split, n: usize) -> Result<EnsembleWeights> {
    if n == 0 {
        return Err(Error::InvalidInput("top-N needs N >= 1".into()));
    }
    let losses = model_losses(val)?;
    let k = n.min(losses.len());
    let mut w = vec![0.0; losses.len()];
    for &m in &ranked_models(&losses)[..k] {
        w[m] = 1.0 / k as f64;
    }
    Ok(EnsembleWeights(w))
}

/// Uniform weights over `min(n, M)` models drawn without replacement.
pub fn random_n(n_models: usize, n: usize, seed: u64) -> Result<EnsembleWeights> {
    if n == 0 || n_models == 0 {
        return Err(Error::InvalidInput("random-N needs N >= 1 and M >= 1".into()));
    }
    let k = n.min(n_models);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0; n_models];
    for m in rand::seq::index::sample(&mut rng, n_models, k) {
        w[m] = 1.0 / k as f64;
    }
    Ok(EnsembleWeights(w))
}

/// One round of greedy selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyRound {
    pub pick: usize,
    /// Validation loss of the uniform average after this pick.
    pub loss: f64,
}

/// Greedy ensemble selection with replacement; returns the per-round trajectory.
pub fn greedy_rounds(val: &Split, slots: usize) -> Result<Vec<GreedyRound>> {
    if slots == 0 {
        return Err(Error::InvalidInput("greedy selection needs at least one slot".into()));
    }
    let view = LossView::new(val)?;
    let mut sums = vec![0.0; view.n];
    let mut rounds = Vec::with_capacity(slots);
    for r in 0..slots {
        let denom = (r + 1) as f64;
        let mut best: Option<GreedyRound> = None;
        for k in 0..view.m {
            let loss = view.loss_of((0..view.n).map(|i| (sums[i] + view.z(i, k)) / denom));
            if best.map_or(true, |b| loss < b.loss) {
                best = Some(GreedyRound { pick: k, loss });
            }
        }
        let best = best.expect("at least one model");
        for (i, s) in sums.iter_mut().enumerate() {
            *s += view.z(i, best.pick);
        }
        rounds.push(best);
    }
    Ok(rounds)
}

/// Greedy ensemble selection with replacement over `slots` rounds.
pub fn greedy_select(val: &Split, slots: usize) -> Result<ModelSelection> {
    Ok(ModelSelection::new(
        greedy_rounds(val, slots)?.into_iter().map(|r| r.pick).collect(),
    ))
}

/// Walks models best-first and keeps one only if it strictly lowers the
/// validation loss of the running uniform average. Stops at `n` picks.
pub fn quick_select(val: &Split, n: usize) -> Result<ModelSelection> {
    if n == 0 {
        return Err(Error::InvalidInput("quick selection needs N >= 1".into()));
    }
    let view = LossView::new(val)?;
    let losses: Vec<f64> = (0..view.m).map(|k| view.model_loss(k)).collect();
    let order = ranked_models(&losses);
    let mut picks = vec![order[0]];
    let mut sums: Vec<f64> = (0..view.n).map(|i| view.z(i, order[0])).collect();
    let mut current = losses[order[0]];
    for &k in &order[1..] {
        if picks.len() >= n {
            break;
        }
        let denom = (picks.len() + 1) as f64;
        let loss = view.loss_of((0..view.n).map(|i| (sums[i] + view.z(i, k)) / denom));
        if loss < current {
            current = loss;
            picks.push(k);
            for (i, s) in sums.iter_mut().enumerate() {
                *s += view.z(i, k);
            }
        }
    }
    Ok(ModelSelection::new(picks))
}

/// `w_i = exp(-d_i / 2) / sum_m exp(-d_m / 2)` with `d_i = loss_i - min loss`.
pub fn akaike_weights(losses: &[f64]) -> Result<EnsembleWeights> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("no losses".into()));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("validation loss".into()));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = losses.iter().map(|l| math::exp(-0.5 * (l - min))).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(EnsembleWeights(w))
}

/// Validation loss of `softmax(logits)` as static weights, and its gradient
/// with respect to `logits`.
pub fn constant_ma_loss_and_grad(val: &Split, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    let view = LossView::new(val)?;
    if logits.len() != view.m {
        return Err(Error::Shape(format!("{} logits for {} models", logits.len(), view.m)));
    }
    let mut w = logits.to_vec();
    softmax_in_place(&mut w);
    let mut dw = vec![0.0; view.m];
    let mut total = 0.0;
    let inv_n = 1.0 / view.n as f64;
    for i in 0..view.n {
        let p: f64 = (0..view.m).map(|k| w[k] * view.z(i, k)).sum();
        let dp = match view.targets {
            None => {
                let pc = clamp_prob(p);
                total += -math::ln(pc);
                if pc == p {
                    -inv_n / p
                } else {
                    0.0
                }
            }
            Some(ys) => {
                let r = p - ys[i];
                total += r * r;
                2.0 * r * inv_n
            }
        };
        for (k, g) in dw.iter_mut().enumerate() {
            *g += dp * view.z(i, k);
        }
    }
    let mean_g: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
    let grad = w.iter().zip(&dw).map(|(wk, gk)| wk * (gk - mean_g)).collect();
    Ok((total * inv_n, grad))
}

/// Learns static softmax-parametrized weights by full-batch Adam on the
/// validation loss, starting from uniform weights.
///
/// The fit is deterministic; `seed` is accepted so every method shares one
/// signature and has no effect here.
pub fn fit_constant_ma(val: &Split, steps: usize, learning_rate: f64, seed: u64) -> Result<EnsembleWeights> {
    let _ = seed;
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "constant model averaging needs at least one step".into(),
        ));
    }
    let m = val.n_models();
    let mut logits = vec![0.0; m];
    let mut adam = AdamState::new(m, AdamConfig::with_learning_rate(learning_rate))?;
    for step in 0..steps {
        let (loss, grad) = constant_ma_loss_and_grad(val, &logits)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                step,
                detail: format!("constant model averaging loss {loss}"),
            });
        }
        adam.step(&mut logits, &grad)?;
    }
    softmax_in_place(&mut logits);
    EnsembleWeights::new(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::synth::{generate, SyntheticSpec};

    fn cls_split(n: usize, m: usize, c: usize, values: Vec<f64>, labels: Vec<usize>) -> Split {
        Split::new(
            PredictionCube::new(n, m, c, values).unwrap(),
            LabelVector::Classes(labels),
        )
    }

    /// Model 0 is perfect, models 1 and 2 are uniform.
    fn perfect_and_uniform() -> Split {
        let labels = vec![0, 1, 1, 0];
        let mut values = Vec::new();
        for &y in &labels {
            let mut onehot = vec![0.0, 0.0];
            onehot[y] = 1.0;
            values.extend(onehot);
            values.extend([0.5, 0.5, 0.5, 0.5]);
        }
        cls_split(4, 3, 2, values, labels)
    }

    #[test]
    fn weights_validate_simplex() {
        assert!(EnsembleWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(EnsembleWeights::new(vec![0.6, 0.5]).is_err());
        assert!(EnsembleWeights::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn predict_static_combinations() {
        let cube = PredictionCube::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = predict_static(&EnsembleWeights::new(vec![0.25, 0.75]).unwrap(), &cube).unwrap();
        assert_eq!(out.as_slice(), &[0.25, 0.75]);
        let out = predict_static(&EnsembleWeights::one_hot(2, 1), &cube).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 1.0]);
        assert!(predict_static(&EnsembleWeights::uniform(3), &cube).is_err());

        let twins = PredictionCube::new(1, 2, 3, vec![0.2, 0.3, 0.5, 0.2, 0.3, 0.5]).unwrap();
        let out = predict_static(&EnsembleWeights::new(vec![0.9, 0.1]).unwrap(), &twins).unwrap();
        for (a, b) in out.as_slice().iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_best_cases() {
        let one = cls_split(2, 1, 2, vec![0.3, 0.7, 0.6, 0.4], vec![1, 0]);
        assert_eq!(single_best(&one).unwrap(), 0);
        let mut s = perfect_and_uniform();
        assert_eq!(single_best(&s).unwrap(), 0);
        // make model 0 identical to model 1: tie goes to index 0 ... of the tied pair
        let vals: Vec<f64> = s.predictions.values().iter().map(|_| 0.5).collect();
        s.predictions = PredictionCube::new(4, 3, 2, vals).unwrap();
        assert_eq!(single_best(&s).unwrap(), 0);
    }

    #[test]
    fn top_n_ranks_by_loss() {
        // regression with per-model losses 0.3, 0.1, 0.2
        let labels = vec![0.0];
        let cube = PredictionCube::new(1, 3, 1, vec![0.3f64.sqrt(), 0.1f64.sqrt(), 0.2f64.sqrt()]).unwrap();
        let s = Split::new(cube, LabelVector::Values(labels));
        assert_eq!(top_n(&s, 2).unwrap().as_slice(), &[0.0, 0.5, 0.5]);
        assert_eq!(top_n(&s, 1).unwrap(), EnsembleWeights::one_hot(3, 1));
        assert_eq!(top_n(&s, 7).unwrap(), EnsembleWeights::uniform(3));
    }

    #[test]
    fn random_n_cases() {
        assert_eq!(random_n(4, 10, 3).unwrap(), EnsembleWeights::uniform(4));
        assert_eq!(random_n(10, 3, 5).unwrap(), random_n(10, 3, 5).unwrap());
        let w = random_n(10, 3, 5).unwrap();
        assert_eq!(w.as_slice().iter().filter(|&&v| v > 0.0).count(), 3);
    }

    #[test]
    fn random_n_single_pick_is_uniform_over_models() {
        let mut counts = [0usize; 10];
        for seed in 0..10_000 {
            let w = random_n(10, 1, seed).unwrap();
            counts[w.as_slice().iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{counts:?}");
        }
    }

    #[test]
    fn greedy_dominant_model_takes_every_slot() {
        let s = perfect_and_uniform();
        assert_eq!(greedy_select(&s, 5).unwrap().picks(), &[0; 5]);
    }

    #[test]
    fn greedy_and_quick_pick_both_experts() {
        let ds = generate(&SyntheticSpec::complementary_experts(2, 3, 500, 0)).unwrap();
        let g = greedy_select(ds.validation(), 4).unwrap();
        assert!(g.contains(0) && g.contains(1), "{:?}", g.picks());
        let q = quick_select(ds.validation(), 50).unwrap();
        assert!(q.contains(0) && q.contains(1), "{:?}", q.picks());
    }

    #[test]
    fn greedy_first_round_is_single_best() {
        let ds = generate(&SyntheticSpec::complementary_experts(3, 3, 300, 1)).unwrap();
        let val = ds.validation();
        let rounds = greedy_rounds(val, 10).unwrap();
        let losses = model_losses(val).unwrap();
        assert_eq!(rounds[0].pick, single_best(val).unwrap());
        assert_eq!(rounds[0].loss, losses[rounds[0].pick]);
    }

    #[test]
    fn greedy_loss_can_rise_after_a_forced_round() {
        // y = 0 with models at +1 and -1: 1, then 0, then 1/9.
        let s = Split::new(
            PredictionCube::new(1, 2, 1, vec![1.0, -1.0]).unwrap(),
            LabelVector::Values(vec![0.0]),
        );
        let rounds = greedy_rounds(&s, 3).unwrap();
        let losses: Vec<f64> = rounds.iter().map(|r| r.loss).collect();
        assert_eq!(losses[..2], [1.0, 0.0]);
        assert!((losses[2] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn quick_identical_models_keeps_single_best() {
        let s = cls_split(
            2,
            3,
            2,
            vec![0.7, 0.3, 0.7, 0.3, 0.7, 0.3, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6],
            vec![0, 1],
        );
        assert_eq!(quick_select(&s, 50).unwrap().picks(), &[0]);
        let one = cls_split(1, 1, 2, vec![0.3, 0.7], vec![1]);
        assert_eq!(quick_select(&one, 50).unwrap().picks(), &[0]);
    }

    #[test]
    fn akaike_golden_values() {
        assert_eq!(akaike_weights(&[0.4, 0.4, 0.4]).unwrap(), EnsembleWeights::uniform(3));
        assert_eq!(akaike_weights(&[3.0]).unwrap().as_slice(), &[1.0]);
        let w = akaike_weights(&[0.0, 2.0 * 2f64.ln()]).unwrap();
        assert!((w.as_slice()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.as_slice()[1] - 1.0 / 3.0).abs() < 1e-12);
        let shifted = akaike_weights(&[5.0, 5.0 + 2.0 * 2f64.ln()]).unwrap();
        assert_eq!(w, shifted);
    }

    #[test]
    fn constant_ma_identical_models_stay_uniform() {
        let s = cls_split(
            2,
            3,
            2,
            vec![0.7, 0.3, 0.7, 0.3, 0.7, 0.3, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6],
            vec![0, 1],
        );
        assert_eq!(fit_constant_ma(&s, 100, 1e-2, 0).unwrap(), EnsembleWeights::uniform(3));
    }

    #[test]
    fn constant_ma_finds_perfect_model() {
        let s = perfect_and_uniform();
        let w = fit_constant_ma(&s, 2000, 1e-3, 0).unwrap();
        assert!(w.as_slice()[0] > 0.9, "{w:?}");
    }

    #[test]
    fn constant_ma_gradient_matches_finite_differences() {
        let cls = generate(&SyntheticSpec::complementary_experts(3, 4, 60, 2)).unwrap();
        let reg = generate(&SyntheticSpec::polynomial_regression(4, 3, 60, 2)).unwrap();
        for ds in [&cls, &reg] {
            let logits = [0.3, -0.2, 0.5, 0.1][..ds.n_models()].to_vec();
            let (_, grad) = constant_ma_loss_and_grad(ds.validation(), &logits).unwrap();
            let numeric = gradcheck::central_differences(
                |x| constant_ma_loss_and_grad(ds.validation(), x).unwrap().0,
                &logits,
                1e-5,
            );
            let cmp = gradcheck::compare(&grad, &numeric, 1e-8);
            assert!(cmp.passes(1e-4, 1e-7), "{cmp:?}");
        }
    }
}
