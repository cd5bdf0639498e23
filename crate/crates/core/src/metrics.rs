//! Evaluation metrics, single-best normalization and ensemble ambiguity.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{LabelVector, PredictionCube, Split, TaskKind, SIMPLEX_TOLERANCE};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Matrix;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Floor applied to single-best denominators in [`normalize`].
pub const NORMALIZE_FLOOR: f64 = 1e-12;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_class_inputs(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::InvalidInput("no instances to evaluate".into()));
    }
    if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= probs.cols()) {
        return Err(Error::InvalidInput(format!(
            "label {y} at instance {i} outside [0, {})",
            probs.cols()
        )));
    }
    for i in 0..probs.rows() {
        let sum: f64 = probs.row(i).iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidInput(format!("probability row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class, with clamped probabilities.
pub fn nll(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_class_inputs(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -math::ln(clamp_prob(probs.get(i, y))))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of instances whose arg-max class differs from the label.
pub fn error_rate(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_class_inputs(probs, labels)?;
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Binary ROC-AUC as the Mann-Whitney statistic (ties count one half).
///
/// `labels` must be 0 (negative) or 1 (positive).
pub fn auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidInput("binary AUC needs labels in {0, 1}".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of mid-ranks of positives, ranks doubled to stay in integers
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_mid = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_group;
        start = end;
    }
    let n_pos_u = n_pos as u128;
    let doubled_u = doubled_rank_sum - n_pos_u * (n_pos_u + 1);
    Ok(doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Mean squared residual.
pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("no instances to evaluate".into()));
    }
    let total: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(total / preds.len() as f64)
}

/// Gaussian negative log-likelihood with unit variance: `ln(2 pi) / 2 + mse / 2`.
pub fn gaussian_nll(preds: &[f64], labels: &[f64]) -> Result<f64> {
    Ok(0.5 * math::ln(2.0 * core::f64::consts::PI) + 0.5 * mse(preds, labels)?)
}

/// Raw metrics of one prediction matrix. Fields that do not apply to the task are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricReport {
    pub nll: Option<f64>,
    pub error_rate: Option<f64>,
    pub auc: Option<f64>,
    pub mse: Option<f64>,
}

/// Metrics divided by the single-best model's metrics on the same dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NormalizedReport {
    pub nll: Option<f64>,
    pub error_rate: Option<f64>,
    pub auc: Option<f64>,
    pub mse: Option<f64>,
}

/// Computes every metric that applies to `task`.
///
/// `preds` is `N x C` class probabilities for classification and `N x 1` point
/// predictions for regression. Regression NLL is the unit-variance Gaussian NLL.
pub fn evaluate(task: TaskKind, preds: &Matrix, labels: &LabelVector) -> Result<MetricReport> {
    match (task, labels) {
        (TaskKind::Classification { n_classes }, LabelVector::Classes(ys)) => {
            if preds.cols() != n_classes {
                return Err(Error::Shape(format!(
                    "{} prediction columns for {n_classes} classes",
                    preds.cols()
                )));
            }
            let auc = if n_classes == 2 {
                let scores: Vec<f64> = (0..preds.rows()).map(|i| preds.get(i, 1)).collect();
                match auc_binary(&scores, ys) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            Ok(MetricReport {
                nll: Some(nll(preds, ys)?),
                error_rate: Some(error_rate(preds, ys)?),
                auc,
                mse: None,
            })
        }
        (TaskKind::Regression, LabelVector::Values(ys)) => {
            if preds.cols() != 1 {
                return Err(Error::Shape(format!(
                    "regression predictions have {} columns",
                    preds.cols()
                )));
            }
            Ok(MetricReport {
                nll: Some(gaussian_nll(preds.as_slice(), ys)?),
                error_rate: None,
                auc: None,
                mse: Some(mse(preds.as_slice(), ys)?),
            })
        }
        _ => Err(Error::InvalidInput("labels do not match the task kind".into())),
    }
}

fn ratio(name: &str, value: Option<f64>, base: Option<f64>) -> Result<Option<f64>> {
    match (value, base) {
        (Some(v), Some(b)) => Ok(Some(v / b.max(NORMALIZE_FLOOR))),
        (None, None) => Ok(None),
        _ => Err(Error::InvalidInput(format!(
            "metric {name} is present in only one report"
        ))),
    }
}

/// Field-wise ratio `report / single_best`, denominators floored at [`NORMALIZE_FLOOR`].
pub fn normalize(report: &MetricReport, single_best: &MetricReport) -> Result<NormalizedReport> {
    Ok(NormalizedReport {
        nll: ratio("nll", report.nll, single_best.nll)?,
        error_rate: ratio("error_rate", report.error_rate, single_best.error_rate)?,
        auc: ratio("auc", report.auc, single_best.auc)?,
        mse: ratio("mse", report.mse, single_best.mse)?,
    })
}

/// Ensemble ambiguity: mean over instances of `sum_m w_m (z_m - zbar)^2`, `zbar = sum_m w_m z_m`.
///
/// `weights` and `base_preds` are both `N x M`; every weight row must be a simplex.
pub fn ambiguity(weights: &Matrix, base_preds: &Matrix) -> Result<f64> {
    if weights.rows() != base_preds.rows() || weights.cols() != base_preds.cols() {
        return Err(Error::Shape(format!(
            "weights are {}x{}, predictions are {}x{}",
            weights.rows(),
            weights.cols(),
            base_preds.rows(),
            base_preds.cols()
        )));
    }
    if weights.rows() == 0 {
        return Err(Error::InvalidInput("no instances".into()));
    }
    let mut total = 0.0;
    for i in 0..weights.rows() {
        let w = weights.row(i);
        let z = base_preds.row(i);
        if let Some(m) = w.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "negative weight at instance {i}, model {m}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("weights at instance {i} sum to {sum}")));
        }
        let zbar: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
        total += w.iter().zip(z).map(|(a, b)| a * (b - zbar) * (b - zbar)).sum::<f64>();
    }
    Ok(total / weights.rows() as f64)
}

/// The scalar each model contributes to [`ambiguity`]: its true-class probability
/// for classification, its point prediction for regression. Returns `N x M`.
pub fn ambiguity_inputs(split: &Split) -> Result<Matrix> {
    let cube = &split.predictions;
    let (n, m) = (cube.n_instances(), cube.n_models());
    let mut out = Matrix::zeros(n, m);
    match &split.labels {
        LabelVector::Classes(ys) => {
            for (i, &y) in ys.iter().enumerate() {
                if y >= cube.n_classes() {
                    return Err(Error::InvalidInput(format!("label {y} out of range")));
                }
                for k in 0..m {
                    out.set(i, k, cube.get(i, k, y));
                }
            }
        }
        LabelVector::Values(_) => {
            if cube.n_classes() != 1 {
                return Err(Error::Shape("regression cube must have one value per model".into()));
            }
            for i in 0..n {
                out.row_mut(i).copy_from_slice(cube.instance(i));
            }
        }
    }
    Ok(out)
}

/// Predictions of a single base model as an `N x C` matrix.
pub fn model_predictions(cube: &PredictionCube, model: usize) -> Matrix {
    let (n, c) = (cube.n_instances(), cube.n_classes());
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(cube.model_row(i, model));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Matrix {
        Matrix::from_vec(rows, cols, v).unwrap()
    }

    #[test]
    fn nll_golden_values() {
        let uniform = mat(2, 4, vec![0.25; 8]);
        assert!((nll(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);

        let onehot = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = nll(&onehot, &[0, 1]).unwrap();
        assert!((v - 1.0000000500000e-7).abs() < 1e-15, "{v}");

        let p = mat(1, 2, vec![0.8, 0.2]);
        assert!((nll(&p, &[0]).unwrap() - 0.2231435513142097).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let p = mat(1, 2, vec![0.5, 0.5]);
        assert!(matches!(nll(&p, &[2]), Err(Error::InvalidInput(_))));
        assert!(matches!(error_rate(&p, &[2]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn error_rate_counts_and_ties() {
        let p = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(error_rate(&p, &[0, 1]).unwrap(), 0.0);
        assert_eq!(error_rate(&p, &[0, 0]).unwrap(), 0.5);
        let tie = mat(1, 2, vec![0.5, 0.5]);
        assert_eq!(error_rate(&tie, &[1]).unwrap(), 1.0);
    }

    #[test]
    fn auc_golden_values() {
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(
            auc_binary(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_matches_pair_enumeration_with_ties() {
        let scores = [0.2, 0.5, 0.5, 0.1, 0.9, 0.5, 0.3];
        let labels = [0, 1, 0, 0, 1, 1, 1];
        let mut good = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        good += 1.0;
                    } else if scores[i] == scores[j] {
                        good += 0.5;
                    }
                }
            }
        }
        assert_eq!(auc_binary(&scores, &labels).unwrap(), good / pairs);
    }

    #[test]
    fn mse_golden_values() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mse(&[10.0, 10.0], &[11.0, 13.0]).unwrap(), 5.0);
        assert!(matches!(mse(&[0.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_ratios() {
        let r = MetricReport {
            nll: Some(1.0),
            error_rate: Some(0.2),
            ..Default::default()
        };
        let b = MetricReport {
            nll: Some(2.0),
            error_rate: Some(0.4),
            ..Default::default()
        };
        let n = normalize(&r, &b).unwrap();
        assert_eq!(n.nll, Some(0.5));
        assert_eq!(n.error_rate, Some(0.5));
        assert_eq!(n.auc, None);

        let same = normalize(&r, &r).unwrap();
        assert_eq!(same.nll, Some(1.0));
        assert_eq!(same.error_rate, Some(1.0));

        let zero = MetricReport {
            nll: Some(0.0),
            error_rate: Some(0.0),
            ..Default::default()
        };
        let n = normalize(&r, &zero).unwrap();
        assert!(n.nll.unwrap().is_finite());

        let partial = MetricReport {
            nll: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(normalize(&r, &partial), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ambiguity_golden_values() {
        let w = mat(1, 2, vec![0.5, 0.5]);
        let z = mat(1, 2, vec![0.0, 1.0]);
        assert_eq!(ambiguity(&w, &z).unwrap(), 0.25);

        let same = mat(2, 3, vec![0.4, 0.4, 0.4, 0.1, 0.1, 0.1]);
        let w3 = mat(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.2, 0.2]);
        assert_eq!(ambiguity(&w3, &same).unwrap(), 0.0);

        let onehot = mat(1, 3, vec![0.0, 1.0, 0.0]);
        let spread = mat(1, 3, vec![-3.0, 0.7, 5.0]);
        assert_eq!(ambiguity(&onehot, &spread).unwrap(), 0.0);

        let neg = mat(1, 2, vec![1.5, -0.5]);
        assert!(matches!(ambiguity(&neg, &z), Err(Error::InvalidInput(_))));
    }
}
