//! Photon-number distributions and the forward map onto click statistics.
//!
//! The model works with distributions truncated at a maximum photon number
//! `M`. Truncation loses a little probability mass for any source with
//! unbounded support; [`PhotonStatistics`] carries that tail mass explicitly
//! instead of silently renormalizing, so diagnostics can tell a poor
//! truncation from a poor fit.
//!
//! [`forward_map`] sends photon statistics `S` through a click-probability
//! matrix to predicted click statistics `Q = P · S`. When `S` is truncated,
//! `P · S` sums to slightly less than 1; the public map renormalizes the
//! result into a valid distribution and [`forward_map_raw`] exposes the
//! unnormalized image for diagnostics and fitting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector_model::ProbabilityMatrix;

/// Slack for validating that externally supplied probabilities form a
/// distribution.
const MASS_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SourceError {
    #[error("mean photon number must be nonnegative and finite, got {0}")]
    InvalidMean(f64),
    #[error("distribution must have at least one entry")]
    Empty,
    #[error("probability {value} at index {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, which exceeds 1")]
    MassExceedsOne { sum: f64 },
    #[error("click probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("photon statistics cover {got} photon numbers but the matrix expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("mapped distribution has no probability mass to normalize")]
    ZeroMass,
}

/// Truncated photon-number distribution of a light source.
///
/// `probs[m]` is the probability of `m` photons in a pulse for
/// `m = 0..=max_photons`; `tail_mass` is the probability of exceeding the
/// truncation, so the entries and the tail sum to 1. `mu` records the mean
/// of the underlying untruncated law when one is known (Poisson sources);
/// empirical distributions leave it unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPhotonStatistics")]
pub struct PhotonStatistics {
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
    probs: Vec<f64>,
    tail_mass: f64,
}

#[derive(Deserialize)]
struct RawPhotonStatistics {
    #[serde(default)]
    mu: Option<f64>,
    probs: Vec<f64>,
    #[serde(default)]
    tail_mass: Option<f64>,
}

impl TryFrom<RawPhotonStatistics> for PhotonStatistics {
    type Error = SourceError;

    fn try_from(raw: RawPhotonStatistics) -> Result<Self, SourceError> {
        let parsed = PhotonStatistics::from_probs(raw.probs, raw.mu)?;
        if let Some(tail) = raw.tail_mass {
            // A stored tail must agree with the entries it was saved with.
            if (tail - parsed.tail_mass).abs() > MASS_SLACK {
                return Err(SourceError::MassExceedsOne {
                    sum: parsed.probs.iter().sum::<f64>() + tail,
                });
            }
        }
        Ok(parsed)
    }
}

impl PhotonStatistics {
    /// Build from explicit probabilities for `m = 0..=M`. The entries must
    /// be a subdistribution (`Σ ≤ 1`); the remainder becomes the tail mass.
    pub fn from_probs(probs: Vec<f64>, mu: Option<f64>) -> Result<Self, SourceError> {
        if probs.is_empty() {
            return Err(SourceError::Empty);
        }
        if let Some(mean) = mu {
            if !mean.is_finite() || mean < 0.0 {
                return Err(SourceError::InvalidMean(mean));
            }
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(SourceError::ProbabilityOutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if sum > 1.0 + MASS_SLACK {
            return Err(SourceError::MassExceedsOne { sum });
        }
        Ok(Self {
            mu,
            probs,
            tail_mass: (1.0 - sum).max(0.0),
        })
    }

    /// Mean of the underlying untruncated distribution, when known.
    pub fn mu(&self) -> Option<f64> {
        self.mu
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of more than `max_photons` photons in a pulse.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn max_photons(&self) -> usize {
        self.probs.len() - 1
    }

    /// Mean of the truncated distribution `Σ m · probs[m]`.
    pub fn truncated_mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(m, &p)| m as f64 * p)
            .sum()
    }
}

/// Measured or predicted click-number distribution.
///
/// `probs[n]` is the probability of an `n`-click readout, `n = 0..=N` for an
/// `N`-pixel detector. Unlike photon statistics this is always a full
/// distribution: every pulse yields exactly one click count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawClickStatistics")]
pub struct ClickStatistics {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawClickStatistics {
    probs: Vec<f64>,
}

impl TryFrom<RawClickStatistics> for ClickStatistics {
    type Error = SourceError;

    fn try_from(raw: RawClickStatistics) -> Result<Self, SourceError> {
        Self::new(raw.probs)
    }
}

impl ClickStatistics {
    pub fn new(probs: Vec<f64>) -> Result<Self, SourceError> {
        if probs.is_empty() {
            return Err(SourceError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(SourceError::ProbabilityOutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > MASS_SLACK {
            return Err(SourceError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_pixels(&self) -> usize {
        self.probs.len() - 1
    }

    /// Probability of `n` clicks; 0 beyond the stored range.
    pub fn probability(&self, n_clicks: usize) -> f64 {
        self.probs.get(n_clicks).copied().unwrap_or(0.0)
    }
}

/// Poisson photon statistics `S(m) = μ^m e^{-μ} / m!` truncated at
/// `max_photons`, the photon-number law of an attenuated laser pulse.
pub fn poisson_statistics(mu: f64, max_photons: usize) -> Result<PhotonStatistics, SourceError> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(SourceError::InvalidMean(mu));
    }
    let mut probs = Vec::with_capacity(max_photons + 1);
    let mut p = (-mu).exp();
    probs.push(p);
    for m in 1..=max_photons {
        p *= mu / m as f64;
        probs.push(p);
    }
    let sum: f64 = probs.iter().sum();
    Ok(PhotonStatistics {
        mu: Some(mu),
        probs,
        tail_mass: (1.0 - sum).max(0.0),
    })
}

/// Unnormalized image `P · S` of photon statistics under the detector map.
///
/// Entry `n` is `Σ_m P(n|m) · S(m)`. The entries sum to `1 - tail_mass`,
/// not to 1, because photon numbers beyond the truncation contribute
/// nothing.
pub fn forward_map_raw(
    p: &ProbabilityMatrix,
    s: &PhotonStatistics,
) -> Result<Vec<f64>, SourceError> {
    if s.probs.len() != p.max_photons() + 1 {
        return Err(SourceError::LengthMismatch {
            expected: p.max_photons() + 1,
            got: s.probs.len(),
        });
    }
    let out = (0..=p.n_pixels())
        .map(|n| {
            s.probs
                .iter()
                .enumerate()
                .map(|(m, &sm)| p.entry(n, m) * sm)
                .sum()
        })
        .collect();
    Ok(out)
}

/// Predicted click statistics `Q = P · S`, renormalized to sum to 1.
///
/// Renormalization spreads the truncated tail proportionally over the click
/// outcomes; keep the truncation order high enough that the tail is
/// negligible (Poisson at `μ ≤ 2` keeps more than 0.9999 of its mass at
/// `M = 9`). Fails with [`SourceError::ZeroMass`] if `S` carries no mass in
/// the truncated range at all.
pub fn forward_map(
    p: &ProbabilityMatrix,
    s: &PhotonStatistics,
) -> Result<ClickStatistics, SourceError> {
    let raw = forward_map_raw(p, s)?;
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(SourceError::ZeroMass);
    }
    Ok(ClickStatistics::from_normalized(
        raw.into_iter().map(|v| v / total).collect(),
    ))
}
