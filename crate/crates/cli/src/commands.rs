//! Command-line front end: argument definitions and the five subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ensemblekit_core::data::MetaDataset;
use ensemblekit_core::neural::{MaskGranularity, Mode, NEConfig};
use ensemblekit_core::synth::{generate, SyntheticSpec};
use rayon::prelude::*;

use crate::io::{load_metadataset, save_metadataset, IoError};
use crate::methods::{fit_predict, run_one, single_best_report, test_metrics, Method, MethodConfig};
use crate::records::{read_records, RecordError, RecordWriter, RunRecord};
use crate::report::{render_table, summarize, write_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ENSEMBLEKIT_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error("{0}")]
    Core(ensemblekit_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl From<ensemblekit_core::Error> for CliError {
    fn from(e: ensemblekit_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(ensemblekit_core::Error::Numeric { .. }) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "ensemblekit",
    version,
    about = "Post-hoc ensembling of frozen base-model predictions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset directory and print its dimensions.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Fit one method per seed on the validation split and append test-split records.
    Run(RunArgs),
    /// Train neural ensemblers across dropout rates.
    SweepDropout(SweepArgs),
    /// Summarize a records file as mean ± std per dataset and method.
    Report {
        records: PathBuf,
        /// CSV copy of the table; defaults to `<records>.report.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Experts,
    Preferred,
    Poly,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Base models [default: experts 2, preferred 20, poly 8].
    #[arg(long)]
    pub models: Option<usize>,
    /// Classes (experts only).
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Instances per split.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Target noise scale (poly only) [default: 0.3].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Correlation of the preferred model with the target.
    #[arg(long, default_value_t = 0.95)]
    pub rho: f64,
    #[arg(long, default_value_t = 10)]
    pub degree: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Stacking,
    Ma,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stacking => Mode::Stacking,
            ModeArg::Ma => Mode::ModelAveraging,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    PerStep,
    PerInstance,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|v| {
            if v.is_empty() {
                Err("empty list".to_string())
            } else {
                Ok(v)
            }
        })
}

/// Comma-separated seed list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

/// Comma-separated dropout rates, each in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates(pub Vec<f64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    parse_list(s).map(Seeds)
}

fn parse_rates(s: &str) -> Result<Rates, String> {
    let rates: Vec<f64> = parse_list(s)?;
    match rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        Some(r) => Err(format!("dropout rate {r} outside [0, 1)")),
        None => Ok(Rates(rates)),
    }
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let Rates(v) = parse_rates(s)?;
    if v.len() == 1 {
        Ok(v[0])
    } else {
        Err("expected one rate".into())
    }
}

/// Data, output and seed flags shared by `run` and `sweep-dropout`.
#[derive(Debug, Args)]
pub struct Shared {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON-lines results file; records are appended.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_seeds, default_value = "0,1,2")]
    pub seeds: Seeds,
}

#[derive(Debug, Args)]
pub struct NeuralArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2048)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Draw one dropout mask per step or one per instance.
    #[arg(long, value_enum, default_value_t = MaskArg::PerStep)]
    pub mask: MaskArg,
}

impl NeuralArgs {
    fn config(&self, mode: Mode) -> NEConfig {
        NEConfig {
            mode,
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            mask_granularity: match self.mask {
                MaskArg::PerStep => MaskGranularity::PerStep,
                MaskArg::PerInstance => MaskGranularity::PerInstance,
            },
            ..NEConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub method: Method,
    /// Ensemble size for random, top-n, quick and greedy.
    #[arg(long, default_value_t = ensemblekit_core::baselines::DEFAULT_ENSEMBLE_SIZE)]
    pub n: usize,
    /// Dropout rate for ne-stack and ne-ma.
    #[arg(long, value_parser = parse_rate, default_value_t = 0.75)]
    pub dropout_rate: f64,
    #[command(flatten)]
    pub neural: NeuralArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long, value_enum, default_value_t = ModeArg::Ma)]
    pub mode: ModeArg,
    #[arg(long, value_parser = parse_rates, default_value = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub rates: Rates,
    #[command(flatten)]
    pub neural: NeuralArgs,
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn cmd_validate(data: &Path) -> CliResult<String> {
    let ds = load_metadataset(data)?;
    let dims = |name: &str, split: &ensemblekit_core::data::Split| {
        format!(
            "{name} N={} M={} C={}",
            split.n_instances(),
            split.n_models(),
            split.predictions.n_classes()
        )
    };
    Ok(format!(
        "{}: {} | {} | {}",
        ds.name(),
        if ds.task().is_classification() {
            "classification"
        } else {
            "regression"
        },
        dims("val", ds.validation()),
        dims("test", ds.test())
    ))
}

pub fn synth_spec(args: &SynthArgs) -> SyntheticSpec {
    let mut spec = match args.kind {
        SynthKind::Experts => {
            SyntheticSpec::complementary_experts(args.models.unwrap_or(2), args.classes, args.n, args.seed)
        }
        SynthKind::Preferred => SyntheticSpec::preferred_model(args.models.unwrap_or(20), args.rho, args.n, args.seed),
        SynthKind::Poly => {
            SyntheticSpec::polynomial_regression(args.models.unwrap_or(8), args.degree, args.n, args.seed)
        }
    };
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    spec
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<String> {
    let ds = generate(&synth_spec(args))?;
    save_metadataset(&ds, &args.out)?;
    Ok(format!("wrote {} to {}", ds.name(), args.out.display()))
}

/// Appends records in order up to the first failure, then reports that failure.
fn write_all(writer: &mut RecordWriter, results: Vec<CliResult<RunRecord>>) -> CliResult<usize> {
    let mut written = 0;
    for r in results {
        writer.append(&r?)?;
        written += 1;
    }
    Ok(written)
}

pub fn cmd_run(args: &RunArgs) -> CliResult<String> {
    let pool = thread_pool()?;
    let mut writer = RecordWriter::open(&args.shared.out)?;
    let ds = load_metadataset(&args.shared.data)?;
    let cfg = MethodConfig {
        ensemble_size: args.n,
        neural: args
            .neural
            .config(args.method.neural_mode().unwrap_or(Mode::ModelAveraging))
            .with_dropout_rate(args.dropout_rate),
    };
    let records = run_seeds(&pool, &ds, args.method, &args.shared.seeds.0, &cfg)?;
    let written = write_all(&mut writer, records)?;
    Ok(format!(
        "{written} record(s) for {} on {} appended to {}",
        args.method,
        ds.name(),
        args.shared.out.display()
    ))
}

/// Runs `method` once per seed in parallel; results come back in seed order.
pub fn run_seeds(
    pool: &rayon::ThreadPool,
    ds: &MetaDataset,
    method: Method,
    seeds: &[u64],
    cfg: &MethodConfig,
) -> CliResult<Vec<CliResult<RunRecord>>> {
    let reference = single_best_report(ds)?;
    Ok(pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| run_one(ds, method, seed, cfg, &reference).map_err(CliError::from))
            .collect()
    }))
}

pub fn cmd_sweep_dropout(args: &SweepArgs) -> CliResult<String> {
    let pool = thread_pool()?;
    let mut writer = RecordWriter::open(&args.shared.out)?;
    let ds = load_metadataset(&args.shared.data)?;
    let records = sweep_dropout(
        &pool,
        &ds,
        args.mode.into(),
        &args.rates.0,
        &args.shared.seeds.0,
        &args.neural,
    )?;
    let written = write_all(&mut writer, records)?;
    Ok(format!(
        "{written} sweep record(s) on {} appended to {}",
        ds.name(),
        args.shared.out.display()
    ))
}

/// One record per (rate, seed), each carrying its NLL relative to the
/// dropout-free run of the same seed.
pub fn sweep_dropout(
    pool: &rayon::ThreadPool,
    ds: &MetaDataset,
    mode: Mode,
    rates: &[f64],
    seeds: &[u64],
    neural: &NeuralArgs,
) -> CliResult<Vec<CliResult<RunRecord>>> {
    let method = match mode {
        Mode::Stacking => Method::NeStack,
        Mode::ModelAveraging => Method::NeMa,
    };
    let reference = single_best_report(ds)?;
    let config_for = |rate: f64| MethodConfig {
        neural: neural.config(mode).with_dropout_rate(rate),
        ..MethodConfig::default()
    };
    // dropout-free NLL per seed, reused when 0 is itself one of the rates
    let baseline: Vec<CliResult<f64>> = if rates.contains(&0.0) {
        Vec::new()
    } else {
        pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| {
                    let preds = fit_predict(ds, method, seed, &config_for(0.0))?;
                    Ok(test_metrics(ds, &preds)?.nll.unwrap_or(f64::NAN))
                })
                .collect()
        })
    };
    let jobs: Vec<(f64, u64)> = rates.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let mut records: Vec<CliResult<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(rate, seed)| run_one(ds, method, seed, &config_for(rate), &reference).map_err(CliError::from))
            .collect()
    });
    let baseline: Vec<f64> = baseline.into_iter().collect::<CliResult<_>>()?;
    let zero_rate = rates.iter().position(|&r| r == 0.0);
    // jobs are rate-major, so a record's seed position is its index modulo the seed count
    for idx in 0..records.len() {
        let seed_pos = idx % seeds.len();
        let base = match zero_rate {
            Some(z) => records[z * seeds.len() + seed_pos]
                .as_ref()
                .ok()
                .and_then(|r| r.metrics.nll),
            None => Some(baseline[seed_pos]),
        };
        if let Ok(rec) = &mut records[idx] {
            rec.dropout_relative_nll = match (rec.metrics.nll, base) {
                (Some(v), Some(b)) => Some(v / b.max(ensemblekit_core::metrics::NORMALIZE_FLOOR)),
                _ => None,
            };
        }
    }
    Ok(records)
}

pub fn default_report_csv(records: &Path) -> PathBuf {
    let mut name = records.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".report.csv");
    records.with_file_name(name)
}

pub fn cmd_report(records_path: &Path, csv_path: Option<&Path>) -> CliResult<String> {
    let records = read_records(records_path)?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("{}: no records", records_path.display())));
    }
    let rows = summarize(&records);
    let csv_path = csv_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_report_csv(records_path));
    let file = std::fs::File::create(&csv_path).map_err(|source| RecordError::Io {
        path: csv_path.clone(),
        source,
    })?;
    write_csv(&rows, file).map_err(|e| CliError::Usage(format!("{}: {e}", csv_path.display())))?;
    Ok(render_table(&rows))
}

pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Validate { data } => cmd_validate(data),
        Command::Synth(args) => cmd_synth(args),
        Command::Run(args) => cmd_run(args),
        Command::SweepDropout(args) => cmd_sweep_dropout(args),
        Command::Report { records, csv } => cmd_report(records, csv.as_deref()),
    }
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            let _ = writeln!(out, "{}", text.trim_end());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
