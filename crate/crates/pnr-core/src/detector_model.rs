//! Click-probability model of a parallel multi-pixel detector.
//!
//! The detector is `N` single-photon pixels behind one beam: a photon lands
//! on pixel `i` and is detected with probability `η_i`, or is missed with
//! probability `1 - Σ η_i`. A pixel that has fired stays blind for the rest
//! of the pulse, so later photons can only trigger the remaining pixels.
//! Threading the photons of a pulse through this rule one at a time induces,
//! for every incident photon number `m`, a distribution over the click count
//! `n`; collecting those distributions as columns gives the click-probability
//! matrix `P` with entries `P(n, m)`.
//!
//! Two routes to `P(n, m)` live here. [`build_p_matrix`] evolves a
//! distribution over fired-pixel subsets photon by photon, which is cheap
//! (`O(m · 2^N · N)`) and exact. [`closed_form_click_probability`] instead
//! sums the textbook enumeration over which photons were detected and which
//! pixels they hit, which is exponentially slower but independent of the
//! recursion; the test suite holds the two equal.

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack on the `Σ η ≤ 1` feasibility check, absorbing summation rounding
/// for vectors that sit exactly on the saturated boundary.
const ETA_SUM_SLACK: f64 = 1e-12;

/// Column sums of a matrix built by this crate are exact to near machine
/// precision.
const BUILT_COLUMN_SLACK: f64 = 1e-12;

/// Matrices loaded from files are often published rounded to a few decimals;
/// accept their columns within this slack without modifying the entries.
const LOADED_COLUMN_SLACK: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("efficiency vector must contain at least one pixel")]
    Empty,
    #[error("pixel efficiency {value} at index {index} is outside [0, 1]")]
    EfficiencyOutOfRange { index: usize, value: f64 },
    #[error("pixel efficiencies sum to {sum}, which exceeds 1")]
    SumExceedsOne { sum: f64 },
    #[error("state covers {state_pixels} pixels but the efficiencies describe {eta_pixels}")]
    PixelCountMismatch {
        state_pixels: usize,
        eta_pixels: usize,
    },
    #[error("invalid probability matrix: {0}")]
    InvalidMatrix(String),
}

/// Per-pixel detection probabilities of a parallel detector.
///
/// Entry `i` is the probability that a single incident photon fires pixel
/// `i`: internal detection efficiency times the share of the beam coupled
/// onto that pixel. Together with the miss outcome the entries form a
/// probability distribution over what happens to one photon, so the vector
/// must satisfy `η_i ∈ [0, 1]` and `Σ η_i ≤ 1`; the saturated case
/// `Σ η_i = 1` (no miss channel) is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEfficiencies")]
pub struct PixelEfficiencies {
    etas: Vec<f64>,
}

#[derive(Deserialize)]
struct RawEfficiencies {
    etas: Vec<f64>,
}

impl TryFrom<RawEfficiencies> for PixelEfficiencies {
    type Error = DetectorError;

    fn try_from(raw: RawEfficiencies) -> Result<Self, DetectorError> {
        Self::new(raw.etas)
    }
}

impl PixelEfficiencies {
    pub fn new(etas: Vec<f64>) -> Result<Self, DetectorError> {
        if etas.is_empty() {
            return Err(DetectorError::Empty);
        }
        for (index, &value) in etas.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(DetectorError::EfficiencyOutOfRange { index, value });
            }
        }
        let sum: f64 = etas.iter().sum();
        if sum > 1.0 + ETA_SUM_SLACK {
            return Err(DetectorError::SumExceedsOne { sum });
        }
        Ok(Self { etas })
    }

    pub fn n_pixels(&self) -> usize {
        self.etas.len()
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    /// System detection efficiency `Σ η_i`: the probability that a single
    /// photon on a fresh detector is detected at all. Clamped to 1 so
    /// boundary rounding never reports an impossible value.
    pub fn total(&self) -> f64 {
        self.etas.iter().sum::<f64>().min(1.0)
    }

    /// Efficiencies in ascending order. Click statistics cannot distinguish
    /// pixel labels, so fits report this canonical form.
    pub fn sorted(&self) -> Vec<f64> {
        let mut sorted = self.etas.clone();
        sorted.sort_by(f64::total_cmp);
        sorted
    }
}

/// Distribution over which subset of pixels has fired so far within a pulse.
///
/// Subsets are bitmasks (bit `i` set means pixel `i` has fired) and the
/// distribution is dense: entry `F` of the backing vector is the probability
/// of subset `F`. [`evolve_one_photon`] advances it by one absorbed photon.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSubsetDistribution {
    probabilities: Vec<f64>,
    n_pixels: usize,
}

impl ActiveSubsetDistribution {
    /// Point mass on the empty subset: a fresh pulse, no pixel fired yet.
    pub fn vacuum(n_pixels: usize) -> Self {
        let mut probabilities = vec![0.0; 1 << n_pixels];
        probabilities[0] = 1.0;
        Self {
            probabilities,
            n_pixels,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    /// Probability of the fired-pixel set `subset` (a bitmask below `2^N`).
    pub fn probability(&self, subset: usize) -> f64 {
        self.probabilities.get(subset).copied().unwrap_or(0.0)
    }

    /// Marginal distribution of the number of fired pixels.
    pub fn click_count_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_pixels + 1];
        for (mask, &p) in self.probabilities.iter().enumerate() {
            counts[mask.count_ones() as usize] += p;
        }
        counts
    }
}

/// One step of the subset recursion, on raw slices so hot loops can reuse
/// buffers. `dst` is overwritten; both slices have length `2^N`.
pub(crate) fn evolve_mass(src: &[f64], dst: &mut [f64], etas: &[f64]) {
    dst.iter_mut().for_each(|v| *v = 0.0);
    for (mask, &p) in src.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut miss = 1.0;
        for (j, &eta) in etas.iter().enumerate() {
            if mask & (1 << j) == 0 {
                miss -= eta;
                dst[mask | (1 << j)] += p * eta;
            }
        }
        // `miss` is exact up to rounding; clamp so a saturated vector cannot
        // leak a negative ulp of probability.
        dst[mask] += p * miss.max(0.0);
    }
}

/// Advance a fired-subset distribution by one absorbed photon.
///
/// From a subset `F` carrying probability `p`, the photon fires a still
/// active pixel `j ∉ F` with probability `η_j` (moving `p · η_j` onto
/// `F ∪ {j}`) or is missed with probability `1 - Σ_{j ∉ F} η_j` (leaving `p`
/// on `F`). Total probability is conserved.
pub fn evolve_one_photon(
    state: &ActiveSubsetDistribution,
    etas: &PixelEfficiencies,
) -> Result<ActiveSubsetDistribution, DetectorError> {
    if state.n_pixels != etas.n_pixels() {
        return Err(DetectorError::PixelCountMismatch {
            state_pixels: state.n_pixels,
            eta_pixels: etas.n_pixels(),
        });
    }
    let mut next = vec![0.0; state.probabilities.len()];
    evolve_mass(&state.probabilities, &mut next, etas.etas());
    Ok(ActiveSubsetDistribution {
        probabilities: next,
        n_pixels: state.n_pixels,
    })
}

/// Click-probability matrix of a detector: entry `(n, m)` is the probability
/// of an `n`-click readout when exactly `m` photons arrive in one pulse.
///
/// Shape is `(N + 1) × (M + 1)` for `N` pixels and photon numbers `0..=M`.
/// Every column is a probability distribution and entries with `n > m`
/// vanish: `m` photons cannot fire more than `m` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct ProbabilityMatrix {
    n_pixels: usize,
    max_photons: usize,
    /// Row-major: `entries[n][m]` is `P(n clicks | m photons)`.
    entries: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawMatrix {
    n_pixels: usize,
    max_photons: usize,
    entries: Vec<Vec<f64>>,
}

impl TryFrom<RawMatrix> for ProbabilityMatrix {
    type Error = DetectorError;

    fn try_from(raw: RawMatrix) -> Result<Self, DetectorError> {
        Self::from_entries_with_slack(
            raw.n_pixels,
            raw.max_photons,
            raw.entries,
            LOADED_COLUMN_SLACK,
        )
    }
}

impl ProbabilityMatrix {
    /// Validated constructor for externally produced entries.
    ///
    /// Checks shape, entry range, the `n > m` support rule, and that each
    /// column sums to 1 within a slack generous enough for matrices that
    /// were published rounded to a few decimal places. Entries are stored
    /// as given, never renormalized.
    pub fn from_entries(
        n_pixels: usize,
        max_photons: usize,
        entries: Vec<Vec<f64>>,
    ) -> Result<Self, DetectorError> {
        Self::from_entries_with_slack(n_pixels, max_photons, entries, LOADED_COLUMN_SLACK)
    }

    fn from_entries_with_slack(
        n_pixels: usize,
        max_photons: usize,
        entries: Vec<Vec<f64>>,
        column_slack: f64,
    ) -> Result<Self, DetectorError> {
        if n_pixels == 0 {
            return Err(DetectorError::InvalidMatrix(
                "matrix must describe at least one pixel".into(),
            ));
        }
        if entries.len() != n_pixels + 1 {
            return Err(DetectorError::InvalidMatrix(format!(
                "expected {} rows for {} pixels, found {}",
                n_pixels + 1,
                n_pixels,
                entries.len()
            )));
        }
        for (n, row) in entries.iter().enumerate() {
            if row.len() != max_photons + 1 {
                return Err(DetectorError::InvalidMatrix(format!(
                    "row {} has {} columns, expected {}",
                    n,
                    row.len(),
                    max_photons + 1
                )));
            }
            for (m, &value) in row.iter().enumerate() {
                if !(0.0..=1.0 + BUILT_COLUMN_SLACK).contains(&value) {
                    return Err(DetectorError::InvalidMatrix(format!(
                        "entry ({n}, {m}) = {value} is outside [0, 1]"
                    )));
                }
                if n > m && value != 0.0 {
                    return Err(DetectorError::InvalidMatrix(format!(
                        "entry ({n}, {m}) = {value} violates the n ≤ m support rule"
                    )));
                }
            }
        }
        for m in 0..=max_photons {
            let sum: f64 = entries.iter().map(|row| row[m]).sum();
            if (sum - 1.0).abs() > column_slack {
                return Err(DetectorError::InvalidMatrix(format!(
                    "column {m} sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self {
            n_pixels,
            max_photons,
            entries,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn max_photons(&self) -> usize {
        self.max_photons
    }

    /// `P(n_clicks | n_photons)`. Total over all inputs: anything outside the
    /// stored shape is an impossible or untracked event with probability 0.
    pub fn entry(&self, n_clicks: usize, n_photons: usize) -> f64 {
        self.entries
            .get(n_clicks)
            .and_then(|row| row.get(n_photons))
            .copied()
            .unwrap_or(0.0)
    }

    /// Rows of the matrix; `rows()[n][m]` is `P(n | m)`.
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Click distribution for exactly `m` photons (column `m`).
    pub fn column(&self, m: usize) -> Vec<f64> {
        self.entries.iter().map(|row| row[m]).collect()
    }
}

/// Build the click-probability matrix for photon numbers `0..=max_photons`.
///
/// Column `m` is the click-count marginal after threading `m` photons
/// through the subset recursion starting from the vacuum state, so each
/// column sums to 1 to machine precision and the `n > m` entries are exact
/// zeros.
pub fn build_p_matrix(etas: &PixelEfficiencies, max_photons: usize) -> ProbabilityMatrix {
    let n_pixels = etas.n_pixels();
    let mut entries = vec![vec![0.0; max_photons + 1]; n_pixels + 1];
    entries[0][0] = 1.0;

    let mut current = vec![0.0; 1 << n_pixels];
    current[0] = 1.0;
    let mut next = vec![0.0; 1 << n_pixels];
    // m is the photon number threading the recursion, not a row index.
    #[allow(clippy::needless_range_loop)]
    for m in 1..=max_photons {
        evolve_mass(&current, &mut next, etas.etas());
        std::mem::swap(&mut current, &mut next);
        for (mask, &p) in current.iter().enumerate() {
            entries[mask.count_ones() as usize][m] += p;
        }
    }

    ProbabilityMatrix {
        n_pixels,
        max_photons,
        entries,
    }
}

/// `P(n_clicks | n_photons)` by literal enumeration.
///
/// Sums over every choice of which of the `m` photons were detected
/// (arrival slots `γ_1 < … < γ_n`) and every ordered sequence of `n`
/// distinct pixels they fired, weighting each history by the product of the
/// firing efficiencies and miss factors `(1 - Σ_active η)^gap` that count
/// only the pixels still active at that stage. Exponentially slower than
/// [`build_p_matrix`] but a direct transcription of the model's defining
/// sum; the test suite holds the two routes equal.
///
/// Impossible events (`n > m` or more clicks than pixels) return 0 rather
/// than an error, keeping the function total.
pub fn closed_form_click_probability(
    etas: &PixelEfficiencies,
    n_clicks: usize,
    n_photons: usize,
) -> f64 {
    let eta = etas.etas();
    if n_clicks == 0 {
        let miss = (1.0 - eta.iter().sum::<f64>()).max(0.0);
        return miss.powi(n_photons as i32);
    }
    if n_clicks > n_photons || n_clicks > eta.len() {
        return 0.0;
    }

    let mut total = 0.0;
    for positions in (1..=n_photons).combinations(n_clicks) {
        for pixels in (0..eta.len()).permutations(n_clicks) {
            let mut term = 1.0;
            let mut fired = vec![false; eta.len()];
            let mut previous_position = 0usize;
            for (&position, &pixel) in positions.iter().zip(&pixels) {
                let active_sum: f64 = eta
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !fired[*j])
                    .map(|(_, &e)| e)
                    .sum();
                let gap = position - previous_position - 1;
                term *= (1.0 - active_sum).max(0.0).powi(gap as i32);
                term *= eta[pixel];
                fired[pixel] = true;
                previous_position = position;
            }
            let active_sum: f64 = eta
                .iter()
                .enumerate()
                .filter(|(j, _)| !fired[*j])
                .map(|(_, &e)| e)
                .sum();
            term *= (1.0 - active_sum)
                .max(0.0)
                .powi((n_photons - previous_position) as i32);
            total += term;
        }
    }
    total
}
