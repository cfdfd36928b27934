//! Photon-statistics reconstruction from measured click statistics.
//!
//! An `N`-pixel detector yields `N + 1` click probabilities per setting, so
//! only `N + 1` photon-number probabilities can be recovered: the full
//! `Q = P · S` relation is truncated to its leading `(N+1) × (N+1)` square
//! block and solved directly. Photon numbers above `N` contribute clicks
//! that the truncated system misattributes, so the reconstruction is
//! trustworthy only while the source's mass beyond `N` photons is small;
//! [`ReconstructionResult::truncation_note`] flags when the supplied matrix
//! says such contributions exist.
//!
//! The solve is a dense LU factorization with partial pivoting. A singular
//! block (for example a detector whose extra pixels are dead, making two
//! click outcomes proportional) is a hard error rather than a silent
//! least-squares answer. The one-norm condition number of the block is
//! always reported; values above [`CONDITION_WARNING_THRESHOLD`] mean click
//! noise is amplified enough that results need independent checking, which
//! the caller may treat as a warning without being blocked.

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::detector_model::ProbabilityMatrix;
use crate::photon_sources::{ClickStatistics, PhotonStatistics};

/// One-norm condition numbers above this flag the truncated system as
/// ill-conditioned in [`ReconstructionResult::is_ill_conditioned`].
pub const CONDITION_WARNING_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum ReconstructionError {
    #[error("click statistics have {got} bins but the matrix implies {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("truncated click matrix is singular and cannot be inverted")]
    SingularTruncation,
    #[error("clipped reconstruction has no positive mass to renormalize")]
    NoPositiveMass,
}

/// Result of inverting the truncated click system.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    raw: Vec<f64>,
    clipped: PhotonStatistics,
    condition_number: f64,
    truncation_note: bool,
}

impl ReconstructionResult {
    /// Direct solution of the truncated system. Sums to 1 by construction
    /// but individual entries may be negative when noise or saturation
    /// exceeds what the truncated model can represent.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Raw solution with negative entries set to zero and the rest
    /// renormalized: always a valid distribution over `0..=N` photons.
    pub fn clipped(&self) -> &PhotonStatistics {
        &self.clipped
    }

    /// One-norm condition number `‖A‖₁ · ‖A⁻¹‖₁` of the truncated block.
    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    /// True when the supplied matrix has click probability beyond the
    /// truncated block, i.e. photon numbers above `N` would contribute to
    /// the measured clicks but cannot appear in the solution.
    pub fn truncation_note(&self) -> bool {
        self.truncation_note
    }

    pub fn is_ill_conditioned(&self) -> bool {
        self.condition_number > CONDITION_WARNING_THRESHOLD
    }
}

impl Serialize for ReconstructionResult {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut state = serializer.serialize_struct("ReconstructionResult", 4)?;
        state.serialize_field("raw", &self.raw)?;
        // The clipped distribution is a plain array here; its photon-number
        // range matches `raw` by construction.
        state.serialize_field("clipped", self.clipped.probs())?;
        state.serialize_field("condition_number", &self.condition_number)?;
        state.serialize_field("truncation_note", &self.truncation_note)?;
        state.end()
    }
}

fn one_norm(matrix: &DMatrix<f64>) -> f64 {
    (0..matrix.ncols())
        .map(|c| matrix.column(c).iter().map(|v| v.abs()).sum())
        .fold(0.0f64, f64::max)
}

/// Solve the square-truncated system `Q = P · S` for the photon statistics.
///
/// Uses columns `0..=N` of the matrix, where `N` is the pixel count. The
/// raw solution conserves the column mass of the system, so its entries sum
/// to 1 even when some are negative.
pub fn reconstruct_statistics(
    p: &ProbabilityMatrix,
    q: &ClickStatistics,
) -> Result<ReconstructionResult, ReconstructionError> {
    let n = p.n_pixels();
    if q.probs().len() != n + 1 {
        return Err(ReconstructionError::DimensionMismatch {
            expected: n + 1,
            got: q.probs().len(),
        });
    }

    let block = DMatrix::from_fn(n + 1, n + 1, |row, col| p.entry(row, col));
    let rhs = DVector::from_column_slice(q.probs());
    let raw = block
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(ReconstructionError::SingularTruncation)?;
    let inverse = block
        .clone()
        .try_inverse()
        .ok_or(ReconstructionError::SingularTruncation)?;
    let condition_number = one_norm(&block) * one_norm(&inverse);
    if !raw.iter().all(|v| v.is_finite()) || !condition_number.is_finite() {
        return Err(ReconstructionError::SingularTruncation);
    }

    let truncation_note =
        (n + 1..=p.max_photons()).any(|m| (0..=n).any(|row| p.entry(row, m) != 0.0));

    let clipped_mass: f64 = raw.iter().filter(|&&v| v > 0.0).sum();
    if clipped_mass <= 0.0 {
        return Err(ReconstructionError::NoPositiveMass);
    }
    let clipped = PhotonStatistics::from_probs(
        raw.iter().map(|&v| v.max(0.0) / clipped_mass).collect(),
        None,
    )
    .expect("clipped reconstruction is a valid distribution");

    Ok(ReconstructionResult {
        raw: raw.iter().copied().collect(),
        clipped,
        condition_number,
        truncation_note,
    })
}
