//! Fitting every ensembling method on a validation split and scoring it on test.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ensemblekit_core::baselines::{
    akaike_weights, fit_constant_ma, greedy_select, model_losses, predict_static, quick_select, random_n, single_best,
    top_n, EnsembleWeights, DEFAULT_ENSEMBLE_SIZE,
};
use ensemblekit_core::data::MetaDataset;
use ensemblekit_core::metrics::{evaluate, normalize, MetricReport};
use ensemblekit_core::neural::{self, MaskGranularity, Mode, NEConfig};
use ensemblekit_core::nn::Matrix;
use ensemblekit_core::Result;

use crate::records::{Metrics, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    SingleBest,
    Random,
    TopN,
    Quick,
    Greedy,
    Akaike,
    ConstantMa,
    NeStack,
    NeMa,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::SingleBest,
        Method::Random,
        Method::TopN,
        Method::Quick,
        Method::Greedy,
        Method::Akaike,
        Method::ConstantMa,
        Method::NeStack,
        Method::NeMa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SingleBest => "single-best",
            Method::Random => "random",
            Method::TopN => "top-n",
            Method::Quick => "quick",
            Method::Greedy => "greedy",
            Method::Akaike => "akaike",
            Method::ConstantMa => "ma",
            Method::NeStack => "ne-stack",
            Method::NeMa => "ne-ma",
        }
    }

    pub fn neural_mode(self) -> Option<Mode> {
        match self {
            Method::NeStack => Some(Mode::Stacking),
            Method::NeMa => Some(Mode::ModelAveraging),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownMethod(pub String);

impl fmt::Display for UnknownMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        write!(f, "unknown method {:?} (expected one of {})", self.0, names.join(", "))
    }
}

impl std::error::Error for UnknownMethod {}

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Stacking => "stacking",
        Mode::ModelAveraging => "ma",
    }
}

/// Hyperparameters shared by all methods; each method reads what applies to it.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    /// Ensemble size for random, top-N, quick and greedy.
    pub ensemble_size: usize,
    /// Neural settings; `mode` and `seed` are overridden per run. `steps` and
    /// `learning_rate` also drive the constant model-averaging fit.
    pub neural: NEConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            neural: NEConfig::default(),
        }
    }
}

impl MethodConfig {
    pub fn neural_config(&self, mode: Mode, seed: u64) -> NEConfig {
        NEConfig {
            mode,
            seed,
            ..self.neural.clone()
        }
    }

    /// Flattened settings that affect `method`.
    pub fn echo(&self, method: Method) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let nc = &self.neural;
        match method {
            Method::Random | Method::TopN | Method::Quick | Method::Greedy => {
                out.insert("n".into(), self.ensemble_size.to_string());
            }
            Method::ConstantMa => {
                out.insert("steps".into(), nc.steps.to_string());
                out.insert("lr".into(), nc.learning_rate.to_string());
            }
            Method::NeStack | Method::NeMa => {
                out.insert("dropout_rate".into(), nc.dropout_rate().to_string());
                out.insert("layers".into(), nc.layers.to_string());
                out.insert("hidden_dim".into(), nc.hidden_dim.to_string());
                out.insert("steps".into(), nc.steps.to_string());
                out.insert("batch_size".into(), nc.batch_size.to_string());
                out.insert("lr".into(), nc.learning_rate.to_string());
                let mask = match nc.mask_granularity {
                    MaskGranularity::PerStep => "per-step",
                    MaskGranularity::PerInstance => "per-instance",
                };
                out.insert("mask".into(), mask.into());
            }
            Method::SingleBest | Method::Akaike => {}
        }
        out
    }
}

/// Fits `method` on the validation split and predicts the test split.
pub fn fit_predict(ds: &MetaDataset, method: Method, seed: u64, cfg: &MethodConfig) -> Result<Matrix> {
    let val = ds.validation();
    let m = ds.n_models();
    let n = cfg.ensemble_size;
    let weights: EnsembleWeights = match method {
        Method::SingleBest => EnsembleWeights::one_hot(m, single_best(val)?),
        Method::Random => random_n(m, n, seed)?,
        Method::TopN => top_n(val, n)?,
        Method::Quick => quick_select(val, n)?.to_weights(m)?,
        Method::Greedy => greedy_select(val, n)?.to_weights(m)?,
        Method::Akaike => akaike_weights(&model_losses(val)?)?,
        Method::ConstantMa => fit_constant_ma(val, cfg.neural.steps, cfg.neural.learning_rate, seed)?,
        Method::NeStack | Method::NeMa => {
            let mode = method.neural_mode().expect("neural method");
            let trained = neural::train(ds, &cfg.neural_config(mode, seed))?;
            return neural::predict(&trained.params, &ds.test().predictions);
        }
    };
    predict_static(&weights, &ds.test().predictions)
}

pub fn test_metrics(ds: &MetaDataset, preds: &Matrix) -> Result<MetricReport> {
    evaluate(ds.task(), preds, &ds.test().labels)
}

/// Test metrics of the single best validation model.
pub fn single_best_report(ds: &MetaDataset) -> Result<MetricReport> {
    let preds = fit_predict(ds, Method::SingleBest, 0, &MethodConfig::default())?;
    test_metrics(ds, &preds)
}

/// Fits, scores and normalizes one run.
pub fn run_one(
    ds: &MetaDataset,
    method: Method,
    seed: u64,
    cfg: &MethodConfig,
    reference: &MetricReport,
) -> Result<RunRecord> {
    let start = Instant::now();
    let preds = fit_predict(ds, method, seed, cfg)?;
    let report = test_metrics(ds, &preds)?;
    let normalized = normalize(&report, reference)?;
    Ok(RunRecord {
        dataset: ds.name().to_string(),
        method: method.name().to_string(),
        mode: method.neural_mode().map(mode_name).unwrap_or("").to_string(),
        seed,
        metrics: report.into(),
        normalized: Some(Metrics::from(normalized)),
        dropout_relative_nll: None,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        config: cfg.echo(method),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ensemblekit_core::synth::{generate, SyntheticSpec};

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("caruana".parse::<Method>().is_err());
    }

    #[test]
    fn single_best_normalizes_to_one() {
        let ds = generate(&SyntheticSpec::complementary_experts(3, 2, 200, 5)).unwrap();
        let reference = single_best_report(&ds).unwrap();
        let rec = run_one(&ds, Method::SingleBest, 0, &MethodConfig::default(), &reference).unwrap();
        let norm = rec.normalized.unwrap();
        for name in Metrics::NAMES {
            if let Some(v) = norm.get(name) {
                assert_eq!(v, 1.0, "{name}");
            }
        }
        assert!(norm.auc.is_some());
    }
}
