//! Least-squares recovery of per-pixel efficiencies from click statistics.
//!
//! Given measured click statistics `q` and the photon statistics `S` of the
//! calibration source, the fit minimizes `‖q - P(η) · S‖₂²` over the
//! feasible set `{η_i ≥ 0, Σ η_i ≤ 1}`, where `P(η)` is the detector's
//! click-probability matrix. Several data sets taken at different source
//! settings can be fitted jointly by summing their squared residuals.
//!
//! The search runs an unconstrained Nelder-Mead simplex in transformed
//! coordinates: a stick-breaking map sends each coordinate through a
//! logistic onto a share of the remaining probability budget, so every
//! iterate is feasible by construction and the boundary (dead pixels,
//! saturated total) is reachable in the limit. The objective has symmetric
//! copies of every optimum under pixel relabeling and can trap a local
//! search between them, so the driver restarts from a deterministic spread
//! of initial totals and random directions and keeps the best result; ties
//! break on the sorted efficiency vector to keep the outcome seed-stable.
//!
//! Click statistics carry no pixel labels, so the result is reported in
//! ascending order.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector_model::{build_p_matrix, PixelEfficiencies};
use crate::photon_sources::{ClickStatistics, PhotonStatistics};
use crate::rng::{child_seed, stream_rng};
use rand::Rng;

/// Logistic shares are kept this far from {0, 1} when inverting the
/// stick-breaking map, bounding the unconstrained coordinates to ~±27.6.
const SHARE_FLOOR: f64 = 1e-12;

/// Simplex edge for the coarse multi-start runs, in transformed coordinates
/// where the logistic has unit scale.
const COARSE_STEP: f64 = 0.7;

/// Simplex edge for the refinement pass around the winning restart.
const POLISH_STEP: f64 = 0.05;

/// Efficiencies below this are snapped to exact zero after the fit when
/// doing so barely moves the objective; Nelder-Mead can approach a dead
/// pixel only asymptotically through the logistic map.
const SNAP_EPS: f64 = 1e-8;

/// Objective slack allowed for the snap-to-zero polish.
const SNAP_SLACK: f64 = 1e-18;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("at least one (clicks, photons) data set is required")]
    NoData,
    #[error("detector must have at least one pixel")]
    NoPixels,
    #[error("click statistics have {got} bins but {n_pixels} pixels imply {expected}")]
    DimensionMismatch {
        n_pixels: usize,
        expected: usize,
        got: usize,
    },
}

/// Search settings for [`fit_efficiencies`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Number of simplex starts; the first uses a closed-form estimate of
    /// the total efficiency, the rest stratify the feasible range.
    pub n_restarts: usize,
    /// Seed for the randomized restart directions.
    pub seed: u64,
    /// Objective evaluation budget per restart.
    pub max_evals: usize,
    /// Stop when the simplex's objective spread falls below this, relative
    /// to the best value.
    pub objective_tol: f64,
    /// Stop when the simplex collapses below this size in transformed
    /// coordinates.
    pub step_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_restarts: 16,
            seed: 0,
            max_evals: 100_000,
            objective_tol: 1e-12,
            step_tol: 1e-9,
        }
    }
}

/// Outcome of an efficiency fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    etas_sorted: Vec<f64>,
    residual_norm: f64,
    converged: bool,
    n_restarts_used: usize,
}

impl FitResult {
    /// Fitted efficiencies in ascending order (pixel labels are not
    /// identifiable from click statistics).
    pub fn etas_sorted(&self) -> &[f64] {
        &self.etas_sorted
    }

    /// `‖q - P(η) · S‖₂` at the returned optimum, summed over data sets.
    pub fn residual_norm(&self) -> f64 {
        self.residual_norm
    }

    /// Whether the winning search run met its tolerances (rather than the
    /// evaluation cap), and the data constrained the efficiencies at all.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn n_restarts_used(&self) -> usize {
        self.n_restarts_used
    }

    pub fn efficiencies(&self) -> PixelEfficiencies {
        PixelEfficiencies::new(self.etas_sorted.clone()).expect("fit output is feasible")
    }
}

/// Fit efficiencies to one measured click distribution.
pub fn fit_efficiencies(
    q: &ClickStatistics,
    s: &PhotonStatistics,
    n_pixels: usize,
    options: &FitOptions,
) -> Result<FitResult, FitError> {
    fit_efficiencies_joint(&[(q.clone(), s.clone())], n_pixels, options)
}

/// Fit one efficiency vector jointly to several data sets.
///
/// Each `(q, s)` pair contributes `‖q - P(η) · S‖₂²` to the objective, so
/// data taken at several source intensities constrain the same detector.
pub fn fit_efficiencies_joint(
    pairs: &[(ClickStatistics, PhotonStatistics)],
    n_pixels: usize,
    options: &FitOptions,
) -> Result<FitResult, FitError> {
    if pairs.is_empty() {
        return Err(FitError::NoData);
    }
    if n_pixels == 0 {
        return Err(FitError::NoPixels);
    }
    for (q, _) in pairs {
        if q.probs().len() != n_pixels + 1 {
            return Err(FitError::DimensionMismatch {
                n_pixels,
                expected: n_pixels + 1,
                got: q.probs().len(),
            });
        }
    }

    let objective = JointObjective { pairs, n_pixels };

    // With no photon mass beyond m = 0, P(η) · S is the same for every η
    // and the objective is flat: report the trivial point, unconverged.
    let informative = pairs
        .iter()
        .any(|(_, s)| s.probs().iter().skip(1).any(|&p| p > 0.0));
    if !informative {
        let zeros = vec![0.0; n_pixels];
        return Ok(FitResult {
            residual_norm: objective.eval_etas(&zeros).sqrt(),
            etas_sorted: zeros,
            converged: false,
            n_restarts_used: 0,
        });
    }

    let n_restarts = options.n_restarts.max(1);
    let base_total = initial_total_estimate(pairs);

    let runs: Vec<RestartRun> = (0..n_restarts)
        .into_par_iter()
        .map(|restart| {
            let start = initial_point(restart, n_restarts, base_total, n_pixels, options.seed);
            let z0 = unconstrained_from_etas(&start);
            let nm = nelder_mead(|z| objective.eval_z(z), &z0, COARSE_STEP, options);
            RestartRun {
                value: nm.value,
                etas: etas_from_unconstrained(&nm.point),
                converged: nm.converged,
            }
        })
        .collect();

    let winner = runs
        .into_iter()
        .min_by(compare_runs)
        .expect("at least one restart ran");

    // Refinement pass: restart a small simplex at the winner; Nelder-Mead
    // never returns a vertex worse than its start, but keep the guard.
    let polish_z = unconstrained_from_etas(&winner.etas);
    let polish = nelder_mead(|z| objective.eval_z(z), &polish_z, POLISH_STEP, options);
    let (mut value, mut etas, converged) = if polish.value <= winner.value {
        (
            polish.value,
            etas_from_unconstrained(&polish.point),
            polish.converged,
        )
    } else {
        (winner.value, winner.etas, winner.converged)
    };

    let snapped: Vec<f64> = etas
        .iter()
        .map(|&e| if e < SNAP_EPS { 0.0 } else { e })
        .collect();
    if snapped != etas {
        let snapped_value = objective.eval_etas(&snapped);
        if snapped_value <= value + SNAP_SLACK {
            value = snapped_value;
            etas = snapped;
        }
    }

    etas.sort_by(f64::total_cmp);
    Ok(FitResult {
        etas_sorted: etas,
        residual_norm: value.sqrt(),
        converged,
        n_restarts_used: n_restarts,
    })
}

struct RestartRun {
    value: f64,
    etas: Vec<f64>,
    converged: bool,
}

/// Total order on runs: objective first, then the sorted efficiency vector,
/// so the multi-start winner never depends on scheduling.
fn compare_runs(a: &RestartRun, b: &RestartRun) -> Ordering {
    a.value.total_cmp(&b.value).then_with(|| {
        let mut sa = a.etas.clone();
        let mut sb = b.etas.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        for (x, y) in sa.iter().zip(&sb) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    })
}

struct JointObjective<'a> {
    pairs: &'a [(ClickStatistics, PhotonStatistics)],
    n_pixels: usize,
}

impl JointObjective<'_> {
    fn eval_etas(&self, etas: &[f64]) -> f64 {
        let pe = PixelEfficiencies::new(etas.to_vec()).expect("reparameterization stays feasible");
        let max_photons = self
            .pairs
            .iter()
            .map(|(_, s)| s.max_photons())
            .max()
            .expect("pairs are nonempty");
        let p = build_p_matrix(&pe, max_photons);
        let mut total = 0.0;
        for (q, s) in self.pairs {
            for n in 0..=self.n_pixels {
                let predicted: f64 = s
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(m, &sm)| p.entry(n, m) * sm)
                    .sum();
                let r = q.probs()[n] - predicted;
                total += r * r;
            }
        }
        total
    }

    fn eval_z(&self, z: &[f64]) -> f64 {
        self.eval_etas(&etas_from_unconstrained(z))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stick-breaking map: coordinate `i` takes a logistic share of the
/// probability budget left after pixels `0..i`, so any real vector lands in
/// `{η_i ≥ 0, Σ η_i ≤ 1}`.
fn etas_from_unconstrained(z: &[f64]) -> Vec<f64> {
    let mut remaining = 1.0f64;
    z.iter()
        .map(|&zi| {
            let eta = remaining * sigmoid(zi);
            remaining -= eta;
            eta
        })
        .collect()
}

/// Inverse of [`etas_from_unconstrained`], with shares clamped away from
/// {0, 1} so boundary points stay finite.
fn unconstrained_from_etas(etas: &[f64]) -> Vec<f64> {
    let mut remaining = 1.0f64;
    etas.iter()
        .map(|&eta| {
            let share = if remaining > 0.0 {
                (eta / remaining).clamp(SHARE_FLOOR, 1.0 - SHARE_FLOOR)
            } else {
                SHARE_FLOOR
            };
            remaining -= eta;
            (share / (1.0 - share)).ln()
        })
        .collect()
}

/// Closed-form estimate of the total efficiency used to seed the first
/// restart: a Poisson source gives `Q(0) = e^{-μ T}`, so `T ≈ -ln Q(0) / μ`;
/// otherwise fall back to the ratio of mean clicks to mean photons.
fn initial_total_estimate(pairs: &[(ClickStatistics, PhotonStatistics)]) -> f64 {
    let mut estimates = Vec::new();
    for (q, s) in pairs {
        let q0 = q.probs()[0];
        let estimate = match s.mu() {
            Some(mu) if mu > 0.0 && q0 > 0.0 && q0 < 1.0 => -q0.ln() / mu,
            _ => {
                let mean_clicks: f64 = q
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(n, &p)| n as f64 * p)
                    .sum();
                let mean_photons = s.truncated_mean();
                if mean_photons > 0.0 {
                    mean_clicks / mean_photons
                } else {
                    continue;
                }
            }
        };
        estimates.push(estimate);
    }
    if estimates.is_empty() {
        return 0.5;
    }
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    mean.clamp(1e-4, 0.9999)
}

/// Start point for restart `restart`: the estimate-based uniform split for
/// restart 0, then stratified totals with Dirichlet directions.
fn initial_point(
    restart: usize,
    n_restarts: usize,
    base_total: f64,
    n_pixels: usize,
    seed: u64,
) -> Vec<f64> {
    if restart == 0 {
        return vec![base_total / n_pixels as f64; n_pixels];
    }
    let mut rng = stream_rng(child_seed(seed, 0), restart as u64);
    let span = (n_restarts - 1) as f64;
    let jitter: f64 = rng.random();
    let total = (((restart - 1) as f64 + jitter) / span).clamp(1e-4, 0.9999);
    let gammas: Vec<f64> = (0..n_pixels)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let gamma_sum: f64 = gammas.iter().sum();
    if gamma_sum <= 0.0 {
        return vec![total / n_pixels as f64; n_pixels];
    }
    gammas.iter().map(|&g| total * g / gamma_sum).collect()
}

struct NmOutcome {
    point: Vec<f64>,
    value: f64,
    converged: bool,
}

/// Nelder-Mead simplex search with the standard reflection/expansion/
/// contraction/shrink coefficients (1, 2, 1/2, 1/2).
///
/// Stops when the simplex's objective spread drops below `objective_tol`
/// relative to the best value, when its extent drops below `step_tol`, or
/// when `max_evals` evaluations are spent; only the last case reports
/// `converged = false`. The best vertex is monotone, so the result is never
/// worse than the start point.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    start: &[f64],
    initial_step: f64,
    options: &FitOptions,
) -> NmOutcome {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let dim = start.len();
    let mut evals = 0usize;
    let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(dim + 1);
    simplex.push((f(start), start.to_vec()));
    for i in 0..dim {
        let mut vertex = start.to_vec();
        vertex[i] += initial_step;
        simplex.push((f(&vertex), vertex));
    }
    evals += dim + 1;

    loop {
        simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
        let best_value = simplex[0].0;
        let spread = simplex[dim].0 - best_value;
        let extent = simplex[1..]
            .iter()
            .flat_map(|(_, v)| v.iter().zip(&simplex[0].1).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if spread <= options.objective_tol * best_value.abs() || extent <= options.step_tol {
            let (value, point) = simplex.swap_remove(0);
            return NmOutcome {
                point,
                value,
                converged: true,
            };
        }
        if evals >= options.max_evals {
            let (value, point) = simplex.swap_remove(0);
            return NmOutcome {
                point,
                value,
                converged: false,
            };
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(_, v)| v[j]).sum::<f64>() / dim as f64)
            .collect();
        let (worst_value, worst_point) = simplex[dim].clone();
        let reflected: Vec<f64> = centroid
            .iter()
            .zip(&worst_point)
            .map(|(c, w)| c + ALPHA * (c - w))
            .collect();
        let reflected_value = f(&reflected);
        evals += 1;

        if reflected_value < best_value {
            let expanded: Vec<f64> = centroid
                .iter()
                .zip(&worst_point)
                .map(|(c, w)| c + GAMMA * (c - w))
                .collect();
            let expanded_value = f(&expanded);
            evals += 1;
            simplex[dim] = if expanded_value < reflected_value {
                (expanded_value, expanded)
            } else {
                (reflected_value, reflected)
            };
            continue;
        }
        if reflected_value < simplex[dim - 1].0 {
            simplex[dim] = (reflected_value, reflected);
            continue;
        }

        let contracted: Vec<f64> = if reflected_value < worst_value {
            centroid
                .iter()
                .zip(&reflected)
                .map(|(c, r)| c + RHO * (r - c))
                .collect()
        } else {
            centroid
                .iter()
                .zip(&worst_point)
                .map(|(c, w)| c - RHO * (c - w))
                .collect()
        };
        let contracted_value = f(&contracted);
        evals += 1;
        if contracted_value < reflected_value.min(worst_value) {
            simplex[dim] = (contracted_value, contracted);
            continue;
        }

        let best = simplex[0].1.clone();
        for (value, vertex) in simplex.iter_mut().skip(1) {
            for (x, b) in vertex.iter_mut().zip(&best) {
                *x = b + SIGMA * (*x - b);
            }
            *value = f(vertex);
            evals += 1;
        }
    }
}
