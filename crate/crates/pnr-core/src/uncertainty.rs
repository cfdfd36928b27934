//! Uncertainty propagation for the calibrated detector model.
//!
//! Calibration rests on two measured quantities: the click statistics
//! (counting noise shrinks with the number of recorded pulses) and the mean
//! photon flux of the reference source (limited by the power meter and the
//! optical path). [`flux_relative_uncertainty`] combines the flux error
//! budget in quadrature; [`matrix_uncertainty`] propagates both sources
//! through the efficiency fit by parametric resampling: each Monte Carlo
//! set redraws the click counts and the flux within their uncertainties,
//! refits the efficiencies, and rebuilds the click-probability matrix, so
//! the elementwise spread of the rebuilt matrices estimates the matrix
//! uncertainty without assuming any error propagation linearity.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector_model::{build_p_matrix, ProbabilityMatrix};
use crate::efficiency_fit::{fit_efficiencies, FitError, FitOptions};
use crate::photon_sources::{poisson_statistics, ClickStatistics};
use crate::rng::{child_seed, stream_rng};

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("relative uncertainty must be nonnegative and finite, got {0}")]
    InvalidSigma(f64),
    #[error("mean photon number must be nonnegative and finite, got {0}")]
    InvalidMean(f64),
    #[error("at least one trial is required to resample counts")]
    ZeroTrials,
    #[error("at least two Monte Carlo sets are required, got {0}")]
    TooFewSets(usize),
    #[error("click statistics have {got} bins but {n_pixels} pixels imply {expected}")]
    DimensionMismatch {
        n_pixels: usize,
        expected: usize,
        got: usize,
    },
    #[error("{discarded} of {total} Monte Carlo fits failed to converge, more than the allowed fraction")]
    TooManyDiscarded { discarded: usize, total: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Relative error budget of the mean-flux calibration.
///
/// `power_meter` and `operational` enter the quadrature once; `attenuator`
/// enters three times, once per attenuation stage of the calibration chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBudget")]
pub struct FluxErrorBudget {
    sigma_pm_rel: f64,
    sigma_op_rel: f64,
    sigma_at_rel: f64,
}

#[derive(Deserialize)]
struct RawBudget {
    sigma_pm_rel: f64,
    sigma_op_rel: f64,
    sigma_at_rel: f64,
}

impl TryFrom<RawBudget> for FluxErrorBudget {
    type Error = UncertaintyError;

    fn try_from(raw: RawBudget) -> Result<Self, UncertaintyError> {
        Self::new(raw.sigma_pm_rel, raw.sigma_op_rel, raw.sigma_at_rel)
    }
}

impl FluxErrorBudget {
    /// A budget with no flux error at all.
    pub const ZERO: Self = Self {
        sigma_pm_rel: 0.0,
        sigma_op_rel: 0.0,
        sigma_at_rel: 0.0,
    };

    pub fn new(
        sigma_pm_rel: f64,
        sigma_op_rel: f64,
        sigma_at_rel: f64,
    ) -> Result<Self, UncertaintyError> {
        for value in [sigma_pm_rel, sigma_op_rel, sigma_at_rel] {
            if !value.is_finite() || value < 0.0 {
                return Err(UncertaintyError::InvalidSigma(value));
            }
        }
        Ok(Self {
            sigma_pm_rel,
            sigma_op_rel,
            sigma_at_rel,
        })
    }

    pub fn sigma_pm_rel(&self) -> f64 {
        self.sigma_pm_rel
    }

    pub fn sigma_op_rel(&self) -> f64 {
        self.sigma_op_rel
    }

    pub fn sigma_at_rel(&self) -> f64 {
        self.sigma_at_rel
    }
}

/// Total relative uncertainty of the mean photon flux:
/// `√(σ_pm² + σ_op² + 3 σ_at²)`.
pub fn flux_relative_uncertainty(budget: &FluxErrorBudget) -> f64 {
    (budget.sigma_pm_rel * budget.sigma_pm_rel
        + budget.sigma_op_rel * budget.sigma_op_rel
        + 3.0 * budget.sigma_at_rel * budget.sigma_at_rel)
        .sqrt()
}

pub(crate) fn resample_click_counts_with(
    q: &ClickStatistics,
    n_trials: u64,
    rng: &mut ChaCha8Rng,
) -> ClickStatistics {
    let probs = q.probs();
    // Draw the nonzero-click counts binomially and give the zero-click bin
    // the remainder, so the counts always total n_trials. A draw can
    // overshoot the total only through the tiny simultaneous upper tails of
    // every bin; the whole trial is then redrawn.
    loop {
        let mut counts = vec![0u64; probs.len()];
        let mut drawn = 0u64;
        for (n, &p) in probs.iter().enumerate().skip(1) {
            let count = Binomial::new(n_trials, p)
                .expect("click probabilities are valid binomial parameters")
                .sample(rng);
            counts[n] = count;
            drawn += count;
        }
        if drawn <= n_trials {
            counts[0] = n_trials - drawn;
            return ClickStatistics::from_normalized(
                counts.iter().map(|&c| c as f64 / n_trials as f64).collect(),
            );
        }
    }
}

/// Redraw click statistics as if `n_trials` pulses had been recounted.
///
/// Each click number `n ≥ 1` is drawn from `Binomial(n_trials, q[n])` and
/// the zero-click count absorbs the remainder, modeling the multinomial
/// counting noise of a finite acquisition.
pub fn resample_click_counts(
    q: &ClickStatistics,
    n_trials: u64,
    seed: u64,
) -> Result<ClickStatistics, UncertaintyError> {
    if n_trials == 0 {
        return Err(UncertaintyError::ZeroTrials);
    }
    let mut rng = stream_rng(seed, 0);
    Ok(resample_click_counts_with(q, n_trials, &mut rng))
}

pub(crate) fn resample_mu_with(mu: f64, relative_sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mu = mu.max(0.0);
    if mu == 0.0 || relative_sigma == 0.0 {
        return mu;
    }
    let normal = Normal::new(mu, relative_sigma * mu).expect("validated sigma is a valid scale");
    // Truncate at zero by redrawing; for calibration-grade sigmas the
    // negative tail is negligible, so this rarely loops at all.
    loop {
        let draw = normal.sample(rng);
        if draw >= 0.0 {
            return draw;
        }
    }
}

/// Redraw the mean photon number within its calibration uncertainty:
/// Gaussian with standard deviation `relative_sigma · mu`, truncated at
/// zero. A zero mean or zero sigma returns `mu` unchanged.
pub fn resample_mu(mu: f64, relative_sigma: f64, seed: u64) -> Result<f64, UncertaintyError> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(UncertaintyError::InvalidMean(mu));
    }
    if !relative_sigma.is_finite() || relative_sigma < 0.0 {
        return Err(UncertaintyError::InvalidSigma(relative_sigma));
    }
    let mut rng = stream_rng(seed, 0);
    Ok(resample_mu_with(mu, relative_sigma, &mut rng))
}

/// Settings for [`matrix_uncertainty`].
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyOptions {
    /// Number of Monte Carlo resampling sets.
    pub n_sets: usize,
    /// Pulses assumed per set when redrawing the click counts.
    pub n_trials_per_set: u64,
    /// Photon-number truncation of the rebuilt matrices.
    pub max_photons: usize,
    /// Master seed; each set derives an independent child seed from it.
    pub seed: u64,
    /// Settings for the per-set efficiency fits.
    pub fit: FitOptions,
    /// Error out when more than this fraction of fits fails to converge.
    pub max_discard_fraction: f64,
}

impl Default for UncertaintyOptions {
    fn default() -> Self {
        Self {
            n_sets: 200,
            n_trials_per_set: 10_000_000,
            max_photons: 9,
            seed: 0,
            fit: FitOptions::default(),
            max_discard_fraction: 0.10,
        }
    }
}

/// Elementwise statistics of the resampled click-probability matrices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixUncertainty {
    mean_matrix: ProbabilityMatrix,
    sigma_matrix: Vec<Vec<f64>>,
    etas_mean_sorted: Vec<f64>,
    etas_sigma_sorted: Vec<f64>,
    n_trials: usize,
    n_discarded: usize,
}

impl MatrixUncertainty {
    /// Elementwise mean of the resampled matrices; itself a valid
    /// click-probability matrix.
    pub fn mean_matrix(&self) -> &ProbabilityMatrix {
        &self.mean_matrix
    }

    /// Elementwise sample standard deviation (n - 1 denominator), row-major
    /// like the matrix entries. Structurally fixed entries, `(0, 0)` and
    /// the `n > m` triangle, have exactly zero spread.
    pub fn sigma_matrix(&self) -> &[Vec<f64>] {
        &self.sigma_matrix
    }

    /// Mean of the sorted fitted efficiencies across sets.
    pub fn etas_mean_sorted(&self) -> &[f64] {
        &self.etas_mean_sorted
    }

    /// Sample standard deviation of the sorted fitted efficiencies.
    pub fn etas_sigma_sorted(&self) -> &[f64] {
        &self.etas_sigma_sorted
    }

    /// Monte Carlo sets that entered the statistics.
    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    /// Monte Carlo sets dropped because their fit did not converge.
    pub fn n_discarded(&self) -> usize {
        self.n_discarded
    }
}

struct Trial {
    matrix: ProbabilityMatrix,
    etas_sorted: Vec<f64>,
}

/// Propagate counting noise and flux uncertainty into the matrix.
///
/// Each of `options.n_sets` sets redraws the click statistics for
/// `options.n_trials_per_set` pulses and the flux within
/// `flux_relative_uncertainty(budget)`, refits the efficiencies, and
/// rebuilds the matrix. Sets whose fit does not converge are discarded; if
/// more than `options.max_discard_fraction` of them fail, the whole
/// propagation errors out. Deterministic in `options.seed` regardless of
/// thread count.
pub fn matrix_uncertainty(
    q: &ClickStatistics,
    mu: f64,
    n_pixels: usize,
    budget: &FluxErrorBudget,
    options: &UncertaintyOptions,
) -> Result<MatrixUncertainty, UncertaintyError> {
    if options.n_sets < 2 {
        return Err(UncertaintyError::TooFewSets(options.n_sets));
    }
    if options.n_trials_per_set == 0 {
        return Err(UncertaintyError::ZeroTrials);
    }
    if !mu.is_finite() || mu < 0.0 {
        return Err(UncertaintyError::InvalidMean(mu));
    }
    if q.probs().len() != n_pixels + 1 {
        return Err(UncertaintyError::DimensionMismatch {
            n_pixels,
            expected: n_pixels + 1,
            got: q.probs().len(),
        });
    }

    let flux_rel = flux_relative_uncertainty(budget);
    let outcomes: Vec<Result<Option<Trial>, UncertaintyError>> = (0..options.n_sets)
        .into_par_iter()
        .map(|set| {
            let set_seed = child_seed(options.seed, set as u64);
            let mut rng = stream_rng(set_seed, 0);
            let q_set = resample_click_counts_with(q, options.n_trials_per_set, &mut rng);
            let mu_set = resample_mu_with(mu, flux_rel, &mut rng);
            let s_set = poisson_statistics(mu_set, options.max_photons)
                .expect("resampled mean is nonnegative");
            let fit_options = FitOptions {
                seed: child_seed(set_seed, 1),
                ..options.fit.clone()
            };
            let fit = fit_efficiencies(&q_set, &s_set, n_pixels, &fit_options)?;
            if !fit.converged() {
                return Ok(None);
            }
            let matrix = build_p_matrix(&fit.efficiencies(), options.max_photons);
            Ok(Some(Trial {
                matrix,
                etas_sorted: fit.etas_sorted().to_vec(),
            }))
        })
        .collect();

    let mut kept: Vec<Trial> = Vec::with_capacity(options.n_sets);
    let mut discarded = 0usize;
    for outcome in outcomes {
        match outcome? {
            Some(trial) => kept.push(trial),
            None => discarded += 1,
        }
    }
    if discarded as f64 > options.max_discard_fraction * options.n_sets as f64 {
        return Err(UncertaintyError::TooManyDiscarded {
            discarded,
            total: options.n_sets,
        });
    }
    if kept.len() < 2 {
        return Err(UncertaintyError::TooFewSets(kept.len()));
    }

    let n_kept = kept.len() as f64;
    let rows = n_pixels + 1;
    let cols = options.max_photons + 1;

    let mut mean = vec![vec![0.0; cols]; rows];
    for trial in &kept {
        for (r, row) in mean.iter_mut().enumerate() {
            for (c, entry) in row.iter_mut().enumerate() {
                *entry += trial.matrix.entry(r, c);
            }
        }
    }
    for row in &mut mean {
        for entry in row.iter_mut() {
            *entry /= n_kept;
        }
    }

    let mut sigma = vec![vec![0.0; cols]; rows];
    for trial in &kept {
        for (r, row) in sigma.iter_mut().enumerate() {
            for (c, entry) in row.iter_mut().enumerate() {
                let d = trial.matrix.entry(r, c) - mean[r][c];
                *entry += d * d;
            }
        }
    }
    for row in &mut sigma {
        for entry in row.iter_mut() {
            *entry = (*entry / (n_kept - 1.0)).sqrt();
        }
    }

    let mut etas_mean = vec![0.0; n_pixels];
    for trial in &kept {
        for (mean_i, &eta) in etas_mean.iter_mut().zip(&trial.etas_sorted) {
            *mean_i += eta;
        }
    }
    etas_mean.iter_mut().for_each(|v| *v /= n_kept);

    let mut etas_sigma = vec![0.0; n_pixels];
    for trial in &kept {
        for (sigma_i, (&eta, &mean_i)) in etas_sigma
            .iter_mut()
            .zip(trial.etas_sorted.iter().zip(&etas_mean))
        {
            let d = eta - mean_i;
            *sigma_i += d * d;
        }
    }
    etas_sigma
        .iter_mut()
        .for_each(|v| *v = (*v / (n_kept - 1.0)).sqrt());

    let mean_matrix = ProbabilityMatrix::from_entries(n_pixels, options.max_photons, mean)
        .expect("mean of valid matrices is valid");

    Ok(MatrixUncertainty {
        mean_matrix,
        sigma_matrix: sigma,
        etas_mean_sorted: etas_mean,
        etas_sigma_sorted: etas_sigma,
        n_trials: kept.len(),
        n_discarded: discarded,
    })
}
