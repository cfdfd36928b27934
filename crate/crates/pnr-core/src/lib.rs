//! Photon-number resolution with parallel multi-pixel single-photon detectors.
//!
//! A detector built from `N` single-photon pixels wired onto one readout line
//! reports, for each light pulse, only how many pixels fired. Because every
//! pixel latches after its first detection within a pulse, the map from the
//! number of incident photons `m` to the number of clicks `n` is probabilistic
//! and saturates as `m` grows. This crate models that map end to end:
//!
//! * [`detector_model`] builds the click-probability matrix `P`, whose entry
//!   `(n, m)` is the probability of reading `n` clicks when `m` photons
//!   arrive, from the per-pixel detection efficiencies. Two independent
//!   routes are provided: an efficient recursion over fired-pixel subsets and
//!   a literal closed-form enumeration, held equal by tests.
//! * [`photon_sources`] supplies truncated photon-number distributions
//!   (Poisson and user-defined) and the forward map `Q = P * S` from photon
//!   statistics to click statistics.
//! * [`mc_simulator`] draws click histograms pulse by pulse with a seeded,
//!   schedule-independent parallel Monte Carlo loop.
//! * [`efficiency_fit`] recovers the per-pixel efficiencies from measured
//!   click statistics by least squares over the simplex of feasible
//!   efficiency vectors.
//! * [`reconstruction`] inverts the truncated square system to recover photon
//!   statistics from click statistics, reporting conditioning diagnostics.
//! * [`uncertainty`] propagates counting noise and flux calibration error
//!   into matrix and efficiency uncertainties by parametric resampling.
//! * [`pipeline`] turns raw nested threshold counter readings into click
//!   statistics and chains the steps above into file-level workflows.
//!
//! Everything stochastic takes an explicit `u64` seed and produces identical
//! results for identical inputs regardless of thread count.

pub mod detector_model;
pub mod efficiency_fit;
pub mod mc_simulator;
pub mod photon_sources;
pub mod pipeline;
pub mod reconstruction;
pub mod uncertainty;

mod rng;

pub use detector_model::{
    build_p_matrix, closed_form_click_probability, evolve_one_photon, ActiveSubsetDistribution,
    DetectorError, PixelEfficiencies, ProbabilityMatrix,
};
pub use efficiency_fit::{
    fit_efficiencies, fit_efficiencies_joint, FitError, FitOptions, FitResult,
};
pub use mc_simulator::{
    simulate_pulses, ClickCountsHistogram, PulseSource, SimulationConfig, SimulationError,
};
pub use photon_sources::{
    forward_map, forward_map_raw, poisson_statistics, ClickStatistics, PhotonStatistics,
    SourceError,
};
pub use pipeline::{
    counts_to_click_statistics, load_records, run_fit_workflow, run_reconstruct_workflow,
    subtract_dark_counts, CountRecord, FitWorkflowOptions, FitWorkflowOutput, PipelineError,
    ReconstructReport, ReconstructRow,
};
pub use reconstruction::{
    reconstruct_statistics, ReconstructionError, ReconstructionResult, CONDITION_WARNING_THRESHOLD,
};
pub use uncertainty::{
    flux_relative_uncertainty, matrix_uncertainty, resample_click_counts, resample_mu,
    FluxErrorBudget, MatrixUncertainty, UncertaintyError, UncertaintyOptions,
};

// Run the guide's code blocks as doctests so the book stays in sync with the
// library.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/detector-model.md")]
pub mod book_detector_model {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/photon-sources.md")]
pub mod book_photon_sources {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod book_simulation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fitting.md")]
pub mod book_fitting {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reconstruction.md")]
pub mod book_reconstruction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/uncertainty.md")]
pub mod book_uncertainty {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data-pipeline.md")]
pub mod book_data_pipeline {}
