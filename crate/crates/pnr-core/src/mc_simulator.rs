//! Seeded Monte Carlo simulation of click histograms.
//!
//! Each pulse draws a photon number from the source, threads the photons one
//! at a time through the detector (a photon can fire any still-active pixel
//! with that pixel's efficiency, or be missed), and records how many pixels
//! fired. Pulses are independent, so the loop parallelizes; determinism is
//! preserved by giving pulse `i` its own counter-mode RNG stream derived
//! from the seed, which makes the result a pure function of
//! `(config, seed)` no matter how pulses are scheduled across threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector_model::PixelEfficiencies;
use crate::photon_sources::{ClickStatistics, PhotonStatistics};
use crate::rng::stream_rng;

/// Split bound for Poisson sampling by CDF inversion: below this mean the
/// single-walk inversion is exact and fast, above it `e^{-μ}` underflows, so
/// draws are summed in chunks using Poisson additivity.
const POISSON_CHUNK_MEAN: f64 = 500.0;

/// Pulses per parallel work unit; large enough that scheduling overhead is
/// negligible, with per-pulse streams keeping the split invisible to output.
const PULSES_PER_CHUNK: u64 = 65_536;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("at least one pulse is required")]
    ZeroPulses,
    #[error("Poisson mean must be nonnegative and finite, got {0}")]
    InvalidMean(f64),
    #[error("empirical source has no probability mass in the truncated range")]
    EmptySource,
}

/// Photon-number law pulses are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub enum PulseSource {
    /// Attenuated-laser pulses: photon number is Poisson with this mean.
    /// Sampled exactly (no truncation).
    Poisson { mean: f64 },
    /// Photon numbers drawn from an explicit truncated distribution,
    /// renormalized over its stored range.
    Empirical(PhotonStatistics),
}

/// Full description of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub etas: PixelEfficiencies,
    pub source: PulseSource,
    pub n_pulses: u64,
    pub seed: u64,
}

/// Click-count histogram of a simulated (or measured) pulse train.
///
/// `counts[n]` is the number of pulses that produced exactly `n` clicks;
/// the counts always sum to `n_pulses`. The seed that produced the
/// histogram is stored so runs can be reproduced from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHistogram")]
pub struct ClickCountsHistogram {
    n_pulses: u64,
    counts: Vec<u64>,
    seed: u64,
}

#[derive(Deserialize)]
struct RawHistogram {
    n_pulses: u64,
    counts: Vec<u64>,
    seed: u64,
}

impl TryFrom<RawHistogram> for ClickCountsHistogram {
    type Error = SimulationError;

    fn try_from(raw: RawHistogram) -> Result<Self, SimulationError> {
        if raw.counts.is_empty() || raw.counts.iter().sum::<u64>() != raw.n_pulses {
            return Err(SimulationError::ZeroPulses);
        }
        Ok(Self {
            n_pulses: raw.n_pulses,
            counts: raw.counts,
            seed: raw.seed,
        })
    }
}

impl ClickCountsHistogram {
    pub fn n_pulses(&self) -> u64 {
        self.n_pulses
    }

    /// Pulses that produced `n` clicks, indexed by `n`.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Histogram normalized to click-number frequencies.
    pub fn to_click_statistics(&self) -> ClickStatistics {
        let n = self.n_pulses as f64;
        ClickStatistics::from_normalized(self.counts.iter().map(|&c| c as f64 / n).collect())
    }
}

/// Draw a Poisson variate by walking the CDF with a single uniform.
///
/// Exact for any mean where `e^{-μ}` is representable; the caller splits
/// larger means into chunks. The loop always terminates: the partial sums
/// reach every representable value below 1, and the final underflow guard
/// handles the sub-ulp tail.
fn poisson_inversion(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean == 0.0 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut term = (-mean).exp();
    let mut cumulative = term;
    while u >= cumulative {
        k += 1;
        term *= mean / k as f64;
        cumulative += term;
        if term <= 0.0 {
            break;
        }
    }
    k
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let mut remaining = mean;
    let mut total = 0u64;
    while remaining > POISSON_CHUNK_MEAN {
        total += poisson_inversion(rng, POISSON_CHUNK_MEAN);
        remaining -= POISSON_CHUNK_MEAN;
    }
    total + poisson_inversion(rng, remaining)
}

/// Cumulative table for empirical photon-number draws.
struct EmpiricalSampler {
    cdf: Vec<f64>,
}

impl EmpiricalSampler {
    fn new(s: &PhotonStatistics) -> Result<Self, SimulationError> {
        let total: f64 = s.probs().iter().sum();
        if total <= 0.0 {
            return Err(SimulationError::EmptySource);
        }
        let mut acc = 0.0;
        let cdf = s
            .probs()
            .iter()
            .map(|&p| {
                acc += p / total;
                acc
            })
            .collect();
        Ok(Self { cdf })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u) as u64
    }
}

enum PhotonSampler {
    Poisson(f64),
    Empirical(EmpiricalSampler),
}

impl PhotonSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            PhotonSampler::Poisson(mean) => sample_poisson(rng, *mean),
            PhotonSampler::Empirical(table) => table.sample(rng),
        }
    }
}

/// Thread `photons` photons through the detector, one at a time.
///
/// Each photon picks among the still-active pixels with their efficiencies
/// or is missed with the leftover probability. The accumulator walk uses the
/// same summation order as the miss threshold, so the comparison is
/// consistent to the last ulp.
fn clicks_for_pulse(etas: &[f64], photons: u64, rng: &mut ChaCha8Rng) -> usize {
    let mut fired = 0u32;
    let mut n_fired = 0usize;
    for _ in 0..photons {
        if n_fired == etas.len() {
            break;
        }
        let active_sum: f64 = etas
            .iter()
            .enumerate()
            .filter(|(j, _)| fired & (1 << j) == 0)
            .map(|(_, &eta)| eta)
            .sum();
        let u: f64 = rng.random();
        if u < active_sum {
            let mut acc = 0.0;
            for (j, &eta) in etas.iter().enumerate() {
                if fired & (1 << j) != 0 {
                    continue;
                }
                acc += eta;
                if u < acc {
                    fired |= 1 << j;
                    n_fired += 1;
                    break;
                }
            }
        }
    }
    n_fired
}

/// Simulate a pulse train and histogram the click counts.
///
/// Deterministic in `(config, seed)`: pulse `i` always consumes RNG stream
/// `i`, so the histogram is bit-identical across thread counts and runs.
pub fn simulate_pulses(config: &SimulationConfig) -> Result<ClickCountsHistogram, SimulationError> {
    if config.n_pulses == 0 {
        return Err(SimulationError::ZeroPulses);
    }
    let sampler = match &config.source {
        PulseSource::Poisson { mean } => {
            if !mean.is_finite() || *mean < 0.0 {
                return Err(SimulationError::InvalidMean(*mean));
            }
            PhotonSampler::Poisson(*mean)
        }
        PulseSource::Empirical(s) => PhotonSampler::Empirical(EmpiricalSampler::new(s)?),
    };

    let etas = config.etas.etas();
    let n_bins = etas.len() + 1;
    let n_chunks = config.n_pulses.div_ceil(PULSES_PER_CHUNK);
    let counts = (0..n_chunks)
        .into_par_iter()
        .fold(
            || vec![0u64; n_bins],
            |mut acc, chunk| {
                let start = chunk * PULSES_PER_CHUNK;
                let end = (start + PULSES_PER_CHUNK).min(config.n_pulses);
                for pulse in start..end {
                    let mut rng = stream_rng(config.seed, pulse);
                    let photons = sampler.sample(&mut rng);
                    acc[clicks_for_pulse(etas, photons, &mut rng)] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; n_bins],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    Ok(ClickCountsHistogram {
        n_pulses: config.n_pulses,
        counts,
        seed: config.seed,
    })
}
