//! Prediction cubes, labels and meta-datasets.
//!
//! A [`PredictionCube`] stores the outputs of `M` frozen base models on `N`
//! instances, `C` values per model (class probabilities, or one point
//! prediction for regression). Values are instance-major, then model, then
//! class, so the `M x C` block for one instance is contiguous.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Tolerance for class-probability rows summing to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

/// Classification with `n_classes >= 2`, or scalar regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification { n_classes: usize },
    Regression,
}

impl TaskKind {
    pub fn classification(n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "classification needs at least 2 classes, got {n_classes}"
            )));
        }
        Ok(Self::Classification { n_classes })
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Self::Classification { n_classes } => *n_classes,
            Self::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Self::Classification { .. })
    }
}

/// `N x M x C` tensor of base-model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCube {
    n_instances: usize,
    n_models: usize,
    n_classes: usize,
    values: Vec<f64>,
}

impl PredictionCube {
    pub fn new(n_instances: usize, n_models: usize, n_classes: usize, values: Vec<f64>) -> Result<Self> {
        if n_models == 0 || n_classes == 0 {
            return Err(Error::Shape(format!(
                "a cube needs at least one model and one class, got M={n_models} C={n_classes}"
            )));
        }
        if values.len() != n_instances * n_models * n_classes {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {n_instances}x{n_models}x{n_classes} cube",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let per_instance = n_models * n_classes;
            return Err(Error::NonFinite(format!(
                "prediction at instance {}, model {}, class {}",
                pos / per_instance,
                (pos % per_instance) / n_classes,
                pos % n_classes
            )));
        }
        Ok(Self {
            n_instances,
            n_models,
            n_classes,
            values,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, instance: usize, model: usize, class: usize) -> f64 {
        self.values[(instance * self.n_models + model) * self.n_classes + class]
    }

    /// The `M x C` block of one instance, model-major.
    #[inline]
    pub fn instance(&self, instance: usize) -> &[f64] {
        let w = self.n_models * self.n_classes;
        &self.values[instance * w..(instance + 1) * w]
    }

    /// The `C` outputs of one model on one instance.
    #[inline]
    pub fn model_row(&self, instance: usize, model: usize) -> &[f64] {
        let start = (instance * self.n_models + model) * self.n_classes;
        &self.values[start..start + self.n_classes]
    }

    /// Checks every `(instance, model)` row is a probability simplex.
    pub fn check_simplex(&self, split: &str) -> Result<()> {
        for i in 0..self.n_instances {
            for m in 0..self.n_models {
                let row = self.model_row(i, m);
                let sum: f64 = row.iter().sum();
                let in_range = row.iter().all(|&p| (0.0..=1.0).contains(&p));
                if !in_range || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                    return Err(Error::Simplex {
                        split: split.to_string(),
                        instance: i,
                        model: m,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth targets of one split.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelVector {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl LabelVector {
    pub fn len(&self) -> usize {
        match self {
            Self::Classes(v) => v.len(),
            Self::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Self::Classes(v) => Some(v),
            Self::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Self::Values(v) => Some(v),
            Self::Classes(_) => None,
        }
    }
}

/// Predictions and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub predictions: PredictionCube,
    pub labels: LabelVector,
}

impl Split {
    pub fn new(predictions: PredictionCube, labels: LabelVector) -> Self {
        Self { predictions, labels }
    }

    pub fn n_instances(&self) -> usize {
        self.predictions.n_instances()
    }

    pub fn n_models(&self) -> usize {
        self.predictions.n_models()
    }

    /// Task kind implied by the label type and the cube's class count.
    pub fn task(&self) -> TaskKind {
        match self.labels {
            LabelVector::Classes(_) => TaskKind::Classification {
                n_classes: self.predictions.n_classes(),
            },
            LabelVector::Values(_) => TaskKind::Regression,
        }
    }

    fn validate(&self, task: TaskKind, name: &str) -> Result<()> {
        let cube = &self.predictions;
        if cube.n_classes() != task.n_classes() {
            return Err(Error::Validation(format!(
                "{name} split has {} values per model, task expects {}",
                cube.n_classes(),
                task.n_classes()
            )));
        }
        if self.labels.len() != cube.n_instances() {
            return Err(Error::Validation(format!(
                "{name} split has {} labels for {} instances",
                self.labels.len(),
                cube.n_instances()
            )));
        }
        match (task, &self.labels) {
            (TaskKind::Classification { n_classes }, LabelVector::Classes(ys)) => {
                if let Some((i, y)) = ys.iter().enumerate().find(|(_, &y)| y >= n_classes) {
                    return Err(Error::Validation(format!(
                        "{name} split, instance {i}: label {y} outside [0, {n_classes})"
                    )));
                }
                cube.check_simplex(name)
            }
            (TaskKind::Regression, LabelVector::Values(ys)) => {
                if let Some(i) = ys.iter().position(|y| !y.is_finite()) {
                    return Err(Error::Validation(format!(
                        "{name} split, instance {i}: label is not finite"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Validation(format!(
                "{name} split labels do not match the task kind"
            ))),
        }
    }
}

/// Validation and test splits of one dataset.
///
/// Ensemblers are fitted from [`MetaDataset::validation`] only; the test split is
/// for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    name: String,
    task: TaskKind,
    validation: Split,
    test: Split,
}

impl MetaDataset {
    /// Validates every invariant and assembles the dataset.
    pub fn new(name: impl Into<String>, task: TaskKind, validation: Split, test: Split) -> Result<Self> {
        if let TaskKind::Classification { n_classes } = task {
            if n_classes < 2 {
                return Err(Error::Validation(format!(
                    "classification needs at least 2 classes, got {n_classes}"
                )));
            }
        }
        validation.validate(task, "val")?;
        test.validate(task, "test")?;
        if validation.n_models() != test.n_models() {
            return Err(Error::Validation(format!(
                "val split has {} models, test split has {}",
                validation.n_models(),
                test.n_models()
            )));
        }
        Ok(Self {
            name: name.into(),
            task,
            validation,
            test,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn n_models(&self) -> usize {
        self.validation.n_models()
    }

    pub fn n_classes(&self) -> usize {
        self.task.n_classes()
    }

    pub fn validation(&self) -> &Split {
        &self.validation
    }

    pub fn test(&self) -> &Split {
        &self.test
    }
}
