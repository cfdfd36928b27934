//! Batch front end for the detector model: JSON files in, one JSON document
//! out. Results go to `--output` or stdout; every failure is a single JSON
//! error object on stderr plus a nonzero exit code, so the tool composes
//! cleanly in scripted pipelines.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pnr_core::{
    build_p_matrix, counts_to_click_statistics, flux_relative_uncertainty, load_records,
    matrix_uncertainty, poisson_statistics, run_fit_workflow, run_reconstruct_workflow,
    simulate_pulses, subtract_dark_counts, ClickStatistics, CountRecord, FitOptions,
    FitWorkflowOptions, FluxErrorBudget, PhotonStatistics, PipelineError, PixelEfficiencies,
    ProbabilityMatrix, PulseSource, SimulationConfig, UncertaintyOptions,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "pnr",
    version,
    about = "Model multi-pixel click detectors with photon-number resolution"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Photon-number truncation for sources and matrices.
    #[arg(long, global = true, default_value_t = 9)]
    max_photons: usize,
    /// Write the result here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Build the click-probability matrix from pixel efficiencies.
    BuildMatrix(BuildMatrixArgs),
    /// Simulate laser pulses and histogram the click counts.
    Simulate(SimulateArgs),
    /// Fit pixel efficiencies to one or more counter records.
    Fit(FitArgs),
    /// Invert click statistics into photon-number statistics.
    Reconstruct(ReconstructArgs),
    /// Propagate counting and flux noise into the fitted matrix.
    Uncertainty(UncertaintyArgs),
    /// Combine a flux error budget into one relative uncertainty.
    FluxError(FluxErrorArgs),
}

/// Pixel efficiencies, inline or from a file.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct EtaInput {
    /// Comma-separated pixel efficiencies.
    #[arg(long, value_delimiter = ',', value_name = "CSV")]
    etas: Option<Vec<f64>>,
    /// JSON file holding {"etas": [...]}.
    #[arg(long, value_name = "PATH")]
    etas_file: Option<PathBuf>,
}

impl EtaInput {
    fn resolve(&self) -> Result<PixelEfficiencies, CliError> {
        match (&self.etas, &self.etas_file) {
            (Some(values), None) => PixelEfficiencies::new(values.clone()).map_err(model),
            (None, Some(path)) => read_json(path),
            _ => unreachable!("clap enforces exactly one input"),
        }
    }
}

#[derive(Args)]
struct BuildMatrixArgs {
    #[command(flatten)]
    etas: EtaInput,
}

/// Photon source, Poisson or empirical.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct SourceInput {
    /// Mean photon number of a Poisson source.
    #[arg(long)]
    mu: Option<f64>,
    /// JSON photon statistics to sample from.
    #[arg(long, value_name = "PATH")]
    source_file: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    etas: EtaInput,
    #[command(flatten)]
    source: SourceInput,
    /// Number of pulses to simulate.
    #[arg(long)]
    pulses: u64,
    /// Output shape: the raw histogram or a counter record.
    #[arg(long, value_enum, default_value_t = Emit::Histogram)]
    emit: Emit,
    /// Pulse repetition rate assumed when emitting a record.
    #[arg(long, default_value_t = 1.0e7, value_name = "HZ")]
    rep_rate_hz: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Histogram,
    Record,
}

#[derive(Args)]
struct FitArgs {
    /// Counter record files, each a single record or an array of records.
    #[arg(required = true, value_name = "RECORDS")]
    records: Vec<PathBuf>,
    /// Independent optimizer starts.
    #[arg(long, default_value_t = 16)]
    restarts: usize,
    /// Dark count rate to subtract from every record, in Hz.
    #[arg(long, value_name = "HZ")]
    subtract_dark_rate: Option<f64>,
}

/// Click statistics, as a counter record or directly.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct ClicksInput {
    /// Counter record file.
    #[arg(long, value_name = "PATH")]
    record: Option<PathBuf>,
    /// Click statistics file holding {"probs": [...]}.
    #[arg(long, value_name = "PATH")]
    clicks: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Matrix JSON from build-matrix, or a fit output carrying one.
    #[arg(long, value_name = "PATH")]
    matrix: PathBuf,
    #[command(flatten)]
    clicks: ClicksInput,
    /// Tabulate against a truncated Poisson with this mean.
    #[arg(long)]
    true_mu: Option<f64>,
    /// Dark count rate to subtract from the record, in Hz.
    #[arg(long, value_name = "HZ")]
    subtract_dark_rate: Option<f64>,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[command(flatten)]
    clicks: ClicksInput,
    /// Mean photon number of the calibration source (with --clicks).
    #[arg(long, requires = "clicks", conflicts_with = "record")]
    mu: Option<f64>,
    /// Number of synthetic calibration sets.
    #[arg(long, default_value_t = 200)]
    sets: usize,
    /// Counting trials per set; defaults to a record's own pulse count.
    #[arg(long)]
    trials: Option<u64>,
    /// Relative power-meter uncertainty.
    #[arg(long, default_value_t = 0.0)]
    sigma_pm: f64,
    /// Relative optical-path uncertainty.
    #[arg(long, default_value_t = 0.0)]
    sigma_op: f64,
    /// Relative per-attenuator uncertainty, applied three times.
    #[arg(long, default_value_t = 0.0)]
    sigma_at: f64,
    /// Independent optimizer starts per refit.
    #[arg(long, default_value_t = 16)]
    restarts: usize,
}

#[derive(Args)]
struct FluxErrorArgs {
    /// Relative power-meter uncertainty.
    #[arg(long, default_value_t = 0.0)]
    sigma_pm: f64,
    /// Relative optical-path uncertainty.
    #[arg(long, default_value_t = 0.0)]
    sigma_op: f64,
    /// Relative per-attenuator uncertainty, applied three times.
    #[arg(long, default_value_t = 0.0)]
    sigma_at: f64,
}

enum CliError {
    Usage(String),
    Io {
        path: PathBuf,
        source: io::Error,
    },
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    Model(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Model(_) => "model",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(message) | CliError::Model(message) => message.clone(),
            CliError::Io { path, source } => format!("{}: {source}", path.display()),
            CliError::Parse { path, source } => format!("{}: {source}", path.display()),
        }
    }
}

/// Wrap any library error as a model failure.
fn model<E: std::fmt::Display>(error: E) -> CliError {
    CliError::Model(error.to_string())
}

impl From<PipelineError> for CliError {
    fn from(error: PipelineError) -> Self {
        match error {
            PipelineError::Io { path, source } => CliError::Io { path, source },
            PipelineError::Json { path, source } => CliError::Parse { path, source },
            other => model(other),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(error)
            if matches!(
                error.kind(),
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion
            ) =>
        {
            // Ignore broken pipes from `pnr --help | head` and the like.
            let _ = write!(io::stdout(), "{error}");
            return ExitCode::SUCCESS;
        }
        Err(error) => {
            report(&CliError::Usage(error.to_string()));
            return ExitCode::FAILURE;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            report(&error);
            ExitCode::FAILURE
        }
    }
}

fn report(error: &CliError) {
    let body = json!({"error": {"kind": error.kind(), "message": error.message()}});
    eprintln!("{body}");
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let value = match &cli.command {
        Command::BuildMatrix(args) => cmd_build_matrix(&cli.global, args)?,
        Command::Simulate(args) => cmd_simulate(&cli.global, args)?,
        Command::Fit(args) => cmd_fit(&cli.global, args)?,
        Command::Reconstruct(args) => cmd_reconstruct(&cli.global, args)?,
        Command::Uncertainty(args) => cmd_uncertainty(&cli.global, args)?,
        Command::FluxError(args) => cmd_flux_error(args)?,
    };
    write_output(&cli.global, &value)
}

fn write_output(global: &GlobalArgs, value: &Value) -> Result<(), CliError> {
    let OutputFormat::Json = global.format;
    let mut text = serde_json::to_string_pretty(value).map_err(model)?;
    text.push('\n');
    match &global.output {
        Some(path) => fs::write(path, text).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        }),
        None => match io::stdout().write_all(text.as_bytes()) {
            // A closed pipe downstream is not our failure.
            Err(source) if source.kind() != io::ErrorKind::BrokenPipe => Err(CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            }),
            _ => Ok(()),
        },
    }
}

fn to_value<T: Serialize>(value: &T) -> Result<Value, CliError> {
    serde_json::to_value(value).map_err(model)
}

fn cmd_build_matrix(global: &GlobalArgs, args: &BuildMatrixArgs) -> Result<Value, CliError> {
    let etas = args.etas.resolve()?;
    to_value(&build_p_matrix(&etas, global.max_photons))
}

fn cmd_simulate(global: &GlobalArgs, args: &SimulateArgs) -> Result<Value, CliError> {
    let etas = args.etas.resolve()?;
    let (source, mu) = match (&args.source.mu, &args.source.source_file) {
        (Some(mean), None) => (PulseSource::Poisson { mean: *mean }, Some(*mean)),
        (None, Some(path)) => {
            let stats: PhotonStatistics = read_json(path)?;
            let mu = stats.mu();
            (PulseSource::Empirical(stats), mu)
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    let config = SimulationConfig {
        etas,
        source,
        n_pulses: args.pulses,
        seed: global.seed,
    };
    let histogram = simulate_pulses(&config).map_err(model)?;
    match args.emit {
        Emit::Histogram => to_value(&histogram),
        Emit::Record => to_value(&CountRecord::from_histogram(
            &histogram,
            args.rep_rate_hz,
            mu,
        )),
    }
}

fn load_all_records(
    paths: &[PathBuf],
    dark_rate: Option<f64>,
) -> Result<Vec<CountRecord>, CliError> {
    let mut records = Vec::new();
    for path in paths {
        records.extend(load_records(path)?);
    }
    if let Some(rate) = dark_rate {
        records = records
            .iter()
            .map(|record| subtract_dark_counts(record, rate))
            .collect::<Result<_, _>>()?;
    }
    Ok(records)
}

fn cmd_fit(global: &GlobalArgs, args: &FitArgs) -> Result<Value, CliError> {
    let records = load_all_records(&args.records, args.subtract_dark_rate)?;
    let options = FitWorkflowOptions {
        max_photons: global.max_photons,
        fit: FitOptions {
            n_restarts: args.restarts,
            seed: global.seed,
            ..FitOptions::default()
        },
    };
    to_value(&run_fit_workflow(&records, &options)?)
}

/// A matrix file is either the matrix itself or a fit output wrapping one.
fn read_matrix(path: &Path) -> Result<ProbabilityMatrix, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if let Ok(matrix) = serde_json::from_str::<ProbabilityMatrix>(&text) {
        return Ok(matrix);
    }
    #[derive(Deserialize)]
    struct Wrapped {
        matrix: ProbabilityMatrix,
    }
    serde_json::from_str::<Wrapped>(&text)
        .map(|wrapped| wrapped.matrix)
        .map_err(|source| CliError::Parse {
            path: path.to_path_buf(),
            source,
        })
}

impl ClicksInput {
    /// Click statistics plus the record's mean photon number when known.
    fn resolve(
        &self,
        dark_rate: Option<f64>,
    ) -> Result<(ClickStatistics, Option<f64>, Option<u64>), CliError> {
        match (&self.record, &self.clicks) {
            (Some(path), None) => {
                let mut record: CountRecord = read_json(path)?;
                if let Some(rate) = dark_rate {
                    record = subtract_dark_counts(&record, rate)?;
                }
                let q = counts_to_click_statistics(&record)?;
                Ok((q, record.mu, Some(record.total_pulses())))
            }
            (None, Some(path)) => Ok((read_json(path)?, None, None)),
            _ => unreachable!("clap enforces exactly one click input"),
        }
    }
}

fn cmd_reconstruct(global: &GlobalArgs, args: &ReconstructArgs) -> Result<Value, CliError> {
    let matrix = read_matrix(&args.matrix)?;
    let (q, _, _) = args.clicks.resolve(args.subtract_dark_rate)?;
    let s_true = args
        .true_mu
        .map(|mu| poisson_statistics(mu, global.max_photons))
        .transpose()
        .map_err(model)?;
    to_value(&run_reconstruct_workflow(&q, &matrix, s_true.as_ref())?)
}

fn cmd_uncertainty(global: &GlobalArgs, args: &UncertaintyArgs) -> Result<Value, CliError> {
    let (q, record_mu, record_pulses) = args.clicks.resolve(None)?;
    let mu = match (args.mu, record_mu) {
        (Some(mu), _) => mu,
        (None, Some(mu)) => mu,
        (None, None) => {
            return Err(CliError::Usage(
                "the record carries no mean photon number; pass --mu".into(),
            ))
        }
    };
    let budget =
        FluxErrorBudget::new(args.sigma_pm, args.sigma_op, args.sigma_at).map_err(model)?;
    let options = UncertaintyOptions {
        n_sets: args.sets,
        n_trials_per_set: args.trials.or(record_pulses).unwrap_or(10_000_000),
        max_photons: global.max_photons,
        seed: global.seed,
        fit: FitOptions {
            n_restarts: args.restarts,
            seed: global.seed,
            ..FitOptions::default()
        },
        ..UncertaintyOptions::default()
    };
    let n_pixels = q.n_pixels();
    to_value(&matrix_uncertainty(&q, mu, n_pixels, &budget, &options).map_err(model)?)
}

fn cmd_flux_error(args: &FluxErrorArgs) -> Result<Value, CliError> {
    let budget =
        FluxErrorBudget::new(args.sigma_pm, args.sigma_op, args.sigma_at).map_err(model)?;
    Ok(json!({"relative_uncertainty": flux_relative_uncertainty(&budget)}))
}
