//! From raw counter readings to fitted detectors and reconstructed light.
//!
//! Counting hardware reports nested threshold counts: `c_n` is the number
//! of pulses with *at least* `n` clicks, so `c_1 ≥ c_2 ≥ … ≥ c_N`. The
//! pulses with zero clicks are not recorded; their number is the total
//! pulse count (repetition rate times acquisition time) minus `c_1`.
//! [`counts_to_click_statistics`] performs that bookkeeping in integer
//! arithmetic, so the resulting click distribution is exact up to one final
//! division per bin.
//!
//! The workflow functions chain the crate's pieces at file granularity:
//! [`run_fit_workflow`] turns measured records into fitted efficiencies and
//! a calibrated matrix, [`run_reconstruct_workflow`] inverts measured click
//! statistics through a calibrated matrix and lays the result out as a
//! plot-ready table. Both are deterministic given inputs and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector_model::{build_p_matrix, ProbabilityMatrix};
use crate::efficiency_fit::{fit_efficiencies_joint, FitError, FitOptions, FitResult};
use crate::mc_simulator::ClickCountsHistogram;
use crate::photon_sources::{poisson_statistics, ClickStatistics, PhotonStatistics, SourceError};
use crate::reconstruction::{reconstruct_statistics, ReconstructionError, ReconstructionResult};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("record has no threshold counts")]
    EmptyCounts,
    #[error("threshold counts must be nested: count {current} at threshold {threshold} is below the next count {next}")]
    BrokenNesting {
        threshold: usize,
        current: u64,
        next: u64,
    },
    #[error("repetition rate and acquisition time yield no pulses")]
    NoPulses,
    #[error("first threshold count {c1} exceeds the total pulse count {n_tot}")]
    CountsExceedTotal { c1: u64, n_tot: u64 },
    #[error("dark count rate must be nonnegative and finite, got {0}")]
    InvalidDarkRate(f64),
    #[error("at least one record is required")]
    NoRecords,
    #[error("record {index} has {got} thresholds but the first record has {expected}")]
    InconsistentPixelCount {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("record {index} is missing the mean photon number needed for fitting")]
    MissingMu { index: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Reconstruction(#[from] ReconstructionError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// One acquisition of nested threshold counts.
///
/// `threshold_counts[n - 1]` is the number of pulses with at least `n`
/// clicks (thresholds start at 1; zero-click pulses are inferred from the
/// repetition rate and acquisition time). `mu` carries the mean photon
/// number of the calibration source when the record is used for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub threshold_counts: Vec<u64>,
    pub rep_rate_hz: f64,
    pub acquisition_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

impl CountRecord {
    /// Number of pixels the record's thresholds cover.
    pub fn n_pixels(&self) -> usize {
        self.threshold_counts.len()
    }

    /// Total pulses in the acquisition window, `round(rate · time)`.
    pub fn total_pulses(&self) -> u64 {
        (self.rep_rate_hz * self.acquisition_time_s).round() as u64
    }

    /// Re-express a simulated histogram as the nested threshold counts the
    /// counting hardware would have reported for it.
    pub fn from_histogram(
        histogram: &ClickCountsHistogram,
        rep_rate_hz: f64,
        mu: Option<f64>,
    ) -> Self {
        let counts = histogram.counts();
        let n_pixels = counts.len().saturating_sub(1);
        let mut thresholds = vec![0u64; n_pixels];
        let mut running = 0u64;
        for n in (1..=n_pixels).rev() {
            running += counts[n];
            thresholds[n - 1] = running;
        }
        Self {
            threshold_counts: thresholds,
            rep_rate_hz,
            acquisition_time_s: histogram.n_pulses() as f64 / rep_rate_hz,
            mu,
        }
    }
}

/// Convert nested threshold counts to a click-number distribution.
///
/// Exclusive counts come from differencing (`c'_n = c_n - c_{n+1}`, with
/// `c'_N = c_N`) and the zero-click count from the pulse total, all in
/// integer arithmetic; the only rounding is the final division by the pulse
/// total, so the distribution's mass is exactly the pulse count.
pub fn counts_to_click_statistics(record: &CountRecord) -> Result<ClickStatistics, PipelineError> {
    let counts = &record.threshold_counts;
    if counts.is_empty() {
        return Err(PipelineError::EmptyCounts);
    }
    for (threshold, pair) in counts.windows(2).enumerate() {
        if pair[0] < pair[1] {
            return Err(PipelineError::BrokenNesting {
                threshold: threshold + 1,
                current: pair[0],
                next: pair[1],
            });
        }
    }
    let pulses = record.rep_rate_hz * record.acquisition_time_s;
    if !pulses.is_finite() || pulses.round() < 1.0 {
        return Err(PipelineError::NoPulses);
    }
    let n_tot = pulses.round() as u64;
    if counts[0] > n_tot {
        return Err(PipelineError::CountsExceedTotal {
            c1: counts[0],
            n_tot,
        });
    }

    let mut exclusive = Vec::with_capacity(counts.len() + 1);
    exclusive.push(n_tot - counts[0]);
    for i in 0..counts.len() {
        let above = counts.get(i + 1).copied().unwrap_or(0);
        exclusive.push(counts[i] - above);
    }
    Ok(ClickStatistics::from_normalized(
        exclusive.iter().map(|&c| c as f64 / n_tot as f64).collect(),
    ))
}

/// Remove an expected background contribution before conversion.
///
/// Dark counts are uncorrelated with the pulsed source and at realistic
/// rates land overwhelmingly one per pulse, so they inflate the lowest
/// threshold: the expected number of background events in the acquisition
/// window (`rate · time`, rounded) is subtracted from `c_1`, clamped so the
/// nesting against `c_2` survives. Higher thresholds are left untouched.
pub fn subtract_dark_counts(
    record: &CountRecord,
    dark_rate_hz: f64,
) -> Result<CountRecord, PipelineError> {
    if !dark_rate_hz.is_finite() || dark_rate_hz < 0.0 {
        return Err(PipelineError::InvalidDarkRate(dark_rate_hz));
    }
    let mut adjusted = record.clone();
    if let Some(c1) = adjusted.threshold_counts.first_mut() {
        let expected = (dark_rate_hz * record.acquisition_time_s).round() as u64;
        let floor = record.threshold_counts.get(1).copied().unwrap_or(0);
        *c1 = c1.saturating_sub(expected).max(floor);
    }
    Ok(adjusted)
}

/// Read count records from a JSON file holding either a single record
/// object or an array of them.
pub fn load_records(path: &Path) -> Result<Vec<CountRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<CountRecord>),
        One(CountRecord),
    }
    match serde_json::from_str::<OneOrMany>(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })? {
        OneOrMany::Many(records) => Ok(records),
        OneOrMany::One(record) => Ok(vec![record]),
    }
}

/// Settings for [`run_fit_workflow`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitWorkflowOptions {
    /// Photon-number truncation of the calibrated matrix.
    pub max_photons: usize,
    pub fit: FitOptions,
}

impl Default for FitWorkflowOptions {
    fn default() -> Self {
        Self {
            max_photons: 9,
            fit: FitOptions::default(),
        }
    }
}

/// Output of [`run_fit_workflow`]: the fit and the matrix it calibrates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitWorkflowOutput {
    pub fit: FitResult,
    pub matrix: ProbabilityMatrix,
}

/// Fit one efficiency vector to every record jointly and build the
/// calibrated click-probability matrix from it.
///
/// Each record must carry the mean photon number of the source it was
/// taken with; records must all cover the same pixel count.
pub fn run_fit_workflow(
    records: &[CountRecord],
    options: &FitWorkflowOptions,
) -> Result<FitWorkflowOutput, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::NoRecords);
    }
    let n_pixels = records[0].n_pixels();
    let mut pairs = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        if record.n_pixels() != n_pixels {
            return Err(PipelineError::InconsistentPixelCount {
                index,
                expected: n_pixels,
                got: record.n_pixels(),
            });
        }
        let mu = record.mu.ok_or(PipelineError::MissingMu { index })?;
        let q = counts_to_click_statistics(record)?;
        let s = poisson_statistics(mu, options.max_photons)?;
        pairs.push((q, s));
    }
    let fit = fit_efficiencies_joint(&pairs, n_pixels, &options.fit)?;
    let matrix = build_p_matrix(&fit.efficiencies(), options.max_photons);
    Ok(FitWorkflowOutput { fit, matrix })
}

/// One photon number of a reconstruction, laid out for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructRow {
    pub m: usize,
    /// True probability when the caller knows it (null otherwise).
    pub s_true: Option<f64>,
    pub s_raw: f64,
    pub s_clipped: f64,
}

/// Reconstruction plus its plot-ready table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructReport {
    pub reconstruction: ReconstructionResult,
    pub table: Vec<ReconstructRow>,
}

/// Invert measured click statistics through a calibrated matrix and lay
/// the outcome out row by row, next to the true distribution if the caller
/// has one (simulation studies).
pub fn run_reconstruct_workflow(
    q: &ClickStatistics,
    matrix: &ProbabilityMatrix,
    s_true: Option<&PhotonStatistics>,
) -> Result<ReconstructReport, PipelineError> {
    let reconstruction = reconstruct_statistics(matrix, q)?;
    let table = reconstruction
        .raw()
        .iter()
        .enumerate()
        .map(|(m, &s_raw)| ReconstructRow {
            m,
            s_true: s_true.and_then(|s| s.probs().get(m).copied()),
            s_raw,
            s_clipped: reconstruction.clipped().probs()[m],
        })
        .collect();
    Ok(ReconstructReport {
        reconstruction,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector_model::PixelEfficiencies;
    use crate::mc_simulator::{simulate_pulses, PulseSource, SimulationConfig};
    use crate::photon_sources::forward_map;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn example_record() -> CountRecord {
        CountRecord {
            threshold_counts: vec![1000, 300, 50, 5],
            rep_rate_hz: 1e7,
            acquisition_time_s: 1.0,
            mu: Some(0.5),
        }
    }

    #[test]
    fn worked_conversion_example() {
        let q = counts_to_click_statistics(&example_record()).unwrap();
        let expected = [0.9999, 7e-5, 2.5e-5, 4.5e-6, 5e-7];
        for (got, want) in q.probs().iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-18);
        }
        let sum: f64 = q.probs().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn conversion_validates_the_record() {
        let mut record = example_record();
        record.threshold_counts = vec![];
        assert!(matches!(
            counts_to_click_statistics(&record).unwrap_err(),
            PipelineError::EmptyCounts
        ));

        let mut record = example_record();
        record.threshold_counts = vec![100, 300, 50, 5];
        assert!(matches!(
            counts_to_click_statistics(&record).unwrap_err(),
            PipelineError::BrokenNesting {
                threshold: 1,
                current: 100,
                next: 300
            }
        ));

        let mut record = example_record();
        record.acquisition_time_s = 0.0;
        assert!(matches!(
            counts_to_click_statistics(&record).unwrap_err(),
            PipelineError::NoPulses
        ));

        let mut record = example_record();
        record.acquisition_time_s = 1e-5;
        assert!(matches!(
            counts_to_click_statistics(&record).unwrap_err(),
            PipelineError::CountsExceedTotal {
                c1: 1000,
                n_tot: 100
            }
        ));
    }

    #[test]
    fn histogram_round_trips_exactly() {
        let config = SimulationConfig {
            etas: PixelEfficiencies::new(vec![0.0248, 0.3565, 0.4862, 0.0566]).unwrap(),
            source: PulseSource::Poisson { mean: 0.5 },
            n_pulses: 100_000,
            seed: 4,
        };
        let histogram = simulate_pulses(&config).unwrap();
        let record = CountRecord::from_histogram(&histogram, 1e7, Some(0.5));
        assert_eq!(record.total_pulses(), 100_000);
        let q = counts_to_click_statistics(&record).unwrap();
        assert_eq!(q.probs(), histogram.to_click_statistics().probs());
    }

    #[test]
    fn dark_subtraction_trims_the_lowest_threshold() {
        let record = example_record();
        let adjusted = subtract_dark_counts(&record, 200.0).unwrap();
        assert_eq!(adjusted.threshold_counts, vec![800, 300, 50, 5]);

        // Clamped so nesting survives an overestimated rate.
        let adjusted = subtract_dark_counts(&record, 900.0).unwrap();
        assert_eq!(adjusted.threshold_counts, vec![300, 300, 50, 5]);

        assert!(matches!(
            subtract_dark_counts(&record, -1.0).unwrap_err(),
            PipelineError::InvalidDarkRate(_)
        ));
    }

    #[test]
    fn records_load_from_single_object_or_array() {
        let dir = tempfile::tempdir().unwrap();
        let single = dir.path().join("single.json");
        let mut file = fs::File::create(&single).unwrap();
        write!(
            file,
            "{}",
            serde_json::to_string(&example_record()).unwrap()
        )
        .unwrap();
        let records = load_records(&single).unwrap();
        assert_eq!(records, vec![example_record()]);

        let many = dir.path().join("many.json");
        let mut file = fs::File::create(&many).unwrap();
        write!(
            file,
            "{}",
            serde_json::to_string(&vec![example_record(), example_record()]).unwrap()
        )
        .unwrap();
        assert_eq!(load_records(&many).unwrap().len(), 2);

        assert!(matches!(
            load_records(&dir.path().join("absent.json")).unwrap_err(),
            PipelineError::Io { .. }
        ));
        let broken = dir.path().join("broken.json");
        fs::write(&broken, "{not json").unwrap();
        assert!(matches!(
            load_records(&broken).unwrap_err(),
            PipelineError::Json { .. }
        ));
    }

    #[test]
    fn fit_workflow_recovers_simulated_efficiencies() {
        let truth = PixelEfficiencies::new(vec![0.0248, 0.3565, 0.4862, 0.0566]).unwrap();
        let records: Vec<CountRecord> = [0.5, 0.8]
            .iter()
            .map(|&mu| {
                let histogram = simulate_pulses(&SimulationConfig {
                    etas: truth.clone(),
                    source: PulseSource::Poisson { mean: mu },
                    n_pulses: 500_000,
                    seed: 42,
                })
                .unwrap();
                CountRecord::from_histogram(&histogram, 1e7, Some(mu))
            })
            .collect();
        let output = run_fit_workflow(&records, &FitWorkflowOptions::default()).unwrap();
        assert!(output.fit.converged());
        for (got, want) in output.fit.etas_sorted().iter().zip(truth.sorted()) {
            assert!((got - want).abs() < 0.02, "got {got}, want {want}");
        }
        assert_eq!(output.matrix.n_pixels(), 4);
        assert_eq!(output.matrix.max_photons(), 9);
    }

    #[test]
    fn fit_workflow_validates_records() {
        assert!(matches!(
            run_fit_workflow(&[], &FitWorkflowOptions::default()).unwrap_err(),
            PipelineError::NoRecords
        ));

        let mut missing_mu = example_record();
        missing_mu.mu = None;
        assert!(matches!(
            run_fit_workflow(&[missing_mu], &FitWorkflowOptions::default()).unwrap_err(),
            PipelineError::MissingMu { index: 0 }
        ));

        let mut short = example_record();
        short.threshold_counts = vec![1000, 300];
        assert!(matches!(
            run_fit_workflow(&[example_record(), short], &FitWorkflowOptions::default())
                .unwrap_err(),
            PipelineError::InconsistentPixelCount {
                index: 1,
                expected: 4,
                got: 2
            }
        ));
    }

    #[test]
    fn reconstruct_workflow_tabulates_the_result() {
        let truth = PixelEfficiencies::new(vec![0.0248, 0.3565, 0.4862, 0.0566]).unwrap();
        let p = build_p_matrix(&truth, 9);
        let s = poisson_statistics(0.5, 9).unwrap();
        let q = forward_map(&p, &s).unwrap();
        let report = run_reconstruct_workflow(&q, &p, Some(&s)).unwrap();

        assert_eq!(report.table.len(), 5);
        for (m, row) in report.table.iter().enumerate() {
            assert_eq!(row.m, m);
            assert_eq!(row.s_true, Some(s.probs()[m]));
            assert_eq!(row.s_raw, report.reconstruction.raw()[m]);
            assert_eq!(row.s_clipped, report.reconstruction.clipped().probs()[m]);
        }

        let anonymous = run_reconstruct_workflow(&q, &p, None).unwrap();
        assert!(anonymous.table.iter().all(|row| row.s_true.is_none()));

        let json = serde_json::to_value(&anonymous).unwrap();
        assert!(json["reconstruction"]["raw"].is_array());
        assert!(json["table"][0]["s_true"].is_null());
    }
}
