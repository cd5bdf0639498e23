//! On-disk meta-dataset layout.
//!
//! A dataset directory holds `manifest.json` plus, for each of the `val` and
//! `test` splits, `<split>_predictions.csv` (columns `m{i}_c{j}`, model-major)
//! and `<split>_labels.csv` (one `label` column). Numbers are written with the
//! shortest representation that parses back to the same `f64`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use ensemblekit_core::data::{LabelVector, MetaDataset, PredictionCube, Split, TaskKind};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 2] = ["val", "test"];

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: file not found", .0.display())]
    NotFound(PathBuf),
    #[error("{path}: {detail}", path = .path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{0}")]
    Validation(ensemblekit_core::Error),
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Self::NotFound(path.to_path_buf())
        } else {
            Self::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    fn format(path: &Path, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub task: String,
    pub n_models: usize,
    pub n_classes: usize,
    pub splits: Vec<String>,
}

impl Manifest {
    pub fn for_dataset(ds: &MetaDataset) -> Self {
        Self {
            name: ds.name().to_string(),
            task: if ds.task().is_classification() {
                "classification"
            } else {
                "regression"
            }
            .to_string(),
            n_models: ds.n_models(),
            n_classes: ds.n_classes(),
            splits: SPLITS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn task_kind(&self, path: &Path) -> Result<TaskKind, IoError> {
        match self.task.as_str() {
            "classification" => {
                TaskKind::classification(self.n_classes).map_err(|e| IoError::format(path, e.to_string()))
            }
            "regression" if self.n_classes == 1 => Ok(TaskKind::Regression),
            "regression" => Err(IoError::format(
                path,
                format!("regression needs n_classes = 1, got {}", self.n_classes),
            )),
            other => Err(IoError::format(path, format!("unknown task {other:?}"))),
        }
    }
}

pub fn prediction_header(n_models: usize, n_classes: usize) -> Vec<String> {
    (0..n_models)
        .flat_map(|m| (0..n_classes).map(move |c| format!("m{m}_c{c}")))
        .collect()
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_error(path: &Path, err: csv::Error) -> IoError {
    match err.into_kind() {
        csv::ErrorKind::Io(e) => IoError::io(path, e),
        other => IoError::format(path, format!("{other:?}")),
    }
}

fn parse_f64(path: &Path, row: usize, field: &str) -> Result<f64, IoError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| IoError::format(path, format!("row {row}: {field:?} is not a number")))
}

fn read_predictions(path: &Path, n_models: usize, n_classes: usize) -> Result<PredictionCube, IoError> {
    let mut reader = csv_reader(path)?;
    let expected = prediction_header(n_models, n_classes);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() != expected.len() {
        return Err(IoError::format(
            path,
            format!(
                "{} columns, manifest implies {} (M={n_models} x C={n_classes})",
                header.len(),
                expected.len()
            ),
        ));
    }
    if let Some((got, want)) = header.iter().zip(&expected).find(|(g, w)| g.trim() != w.as_str()) {
        return Err(IoError::format(
            path,
            format!("column {got:?} where {want:?} was expected"),
        ));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != expected.len() {
            return Err(IoError::format(path, format!("row {n} has {} fields", record.len())));
        }
        for field in record.iter() {
            values.push(parse_f64(path, n, field)?);
        }
        n += 1;
    }
    PredictionCube::new(n, n_models, n_classes, values).map_err(|e| IoError::format(path, e.to_string()))
}

fn read_labels(path: &Path, task: TaskKind) -> Result<LabelVector, IoError> {
    let mut reader = csv_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() != 1 || header.get(0).map(str::trim) != Some("label") {
        return Err(IoError::format(path, "expected a single \"label\" column"));
    }
    let mut classes = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let field = record.get(0).unwrap_or("").trim();
        if task.is_classification() {
            let y = field
                .parse::<usize>()
                .map_err(|_| IoError::format(path, format!("row {row}: {field:?} is not a class index")))?;
            classes.push(y);
        } else {
            values.push(parse_f64(path, row, field)?);
        }
    }
    Ok(if task.is_classification() {
        LabelVector::Classes(classes)
    } else {
        LabelVector::Values(values)
    })
}

/// Reads and fully validates a dataset directory.
pub fn load_metadataset(dir: &Path) -> Result<MetaDataset, IoError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| IoError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| IoError::format(&manifest_path, e.to_string()))?;
    let task = manifest.task_kind(&manifest_path)?;
    if manifest.n_models == 0 {
        return Err(IoError::format(&manifest_path, "n_models must be positive"));
    }
    if manifest.splits.iter().map(String::as_str).ne(SPLITS) {
        return Err(IoError::format(&manifest_path, format!("splits must be {SPLITS:?}")));
    }
    let mut splits = Vec::with_capacity(2);
    for name in SPLITS {
        let pred_path = dir.join(format!("{name}_predictions.csv"));
        let label_path = dir.join(format!("{name}_labels.csv"));
        let cube = read_predictions(&pred_path, manifest.n_models, task.n_classes())?;
        let labels = read_labels(&label_path, task)?;
        if labels.len() != cube.n_instances() {
            return Err(IoError::format(
                &label_path,
                format!("{} labels for {} prediction rows", labels.len(), cube.n_instances()),
            ));
        }
        splits.push(Split::new(cube, labels));
    }
    let test = splits.pop().expect("two splits");
    let val = splits.pop().expect("two splits");
    MetaDataset::new(manifest.name, task, val, test).map_err(IoError::Validation)
}

fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<(), IoError>
where
    I: Iterator<Item = Vec<String>>,
{
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| IoError::io(path, e))
}

/// Writes `ds` in the directory layout read by [`load_metadataset`], creating
/// `dir` if needed. Values round-trip exactly.
pub fn save_metadataset(ds: &MetaDataset, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&Manifest::for_dataset(ds)).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| IoError::io(&manifest_path, e))?;
    for (name, split) in SPLITS.iter().zip([ds.validation(), ds.test()]) {
        let cube = &split.predictions;
        let width = cube.n_models() * cube.n_classes();
        write_csv(
            &dir.join(format!("{name}_predictions.csv")),
            &prediction_header(cube.n_models(), cube.n_classes()),
            (0..cube.n_instances()).map(|i| {
                cube.values()[i * width..(i + 1) * width]
                    .iter()
                    .map(f64::to_string)
                    .collect()
            }),
        )?;
        let labels: Vec<String> = match &split.labels {
            LabelVector::Classes(ys) => ys.iter().map(usize::to_string).collect(),
            LabelVector::Values(ys) => ys.iter().map(f64::to_string).collect(),
        };
        write_csv(
            &dir.join(format!("{name}_labels.csv")),
            &["label".to_string()],
            labels.into_iter().map(|l| vec![l]),
        )?;
    }
    Ok(())
}
