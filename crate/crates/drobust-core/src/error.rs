//! Error type shared by all estimation and simulation routines.

use alloc::string::String;
use core::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes of dataset construction, estimation, and learning.
///
/// Degenerate dual regimes (α̂ = 0 or α̂ = ∞) are deliberately *not* errors:
/// they are reported as statuses/flags by the estimators, because they are
/// legitimate outcomes on real data that callers must be able to observe.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is out of its documented range (fold counts,
    /// radii, learning rates, mismatched fold/model sets, ...).
    InvalidConfiguration {
        /// What was wrong.
        reason: String,
    },
    /// A numeric argument left the mathematical domain of an operation
    /// (e.g. α ≤ 0, nonpositive W, Cressie-Read order k ≤ 1).
    Domain {
        /// Which operation rejected the argument.
        what: &'static str,
    },
    /// A vector dimension did not match the expected one.
    Shape {
        /// Expected dimension.
        expected: usize,
        /// Dimension actually supplied.
        got: usize,
    },
    /// Logged data violates an ingestion invariant (reward outside [0,1],
    /// action index out of range, nonpositive propensity, empty dataset).
    InvalidData {
        /// Index of the offending sample, when applicable.
        index: Option<usize>,
        /// What was wrong.
        reason: String,
    },
    /// The behavior policy puts zero probability on a logged action, so
    /// propensity ratios are undefined.
    OverlapViolation {
        /// Index of the offending sample.
        index: usize,
    },
    /// All importance weights are zero (or the weighted moment underflowed
    /// to zero), leaving nothing to estimate from.
    DegenerateWeights,
    /// A model fit cannot proceed (e.g. propensity fit on single-action data).
    DegenerateFit {
        /// What was wrong.
        reason: String,
    },
    /// The doubly robust moment Ŵ(π, α) was nonpositive over the entire
    /// feasible α range, so the dual value is undefined.
    DrNegativeW,
    /// Every learning restart diverged; per-restart final objectives are
    /// attached for diagnosis.
    OptimizationFailure {
        /// Final objective value per restart (NaN when the restart blew up).
        restarts: alloc::vec::Vec<f64>,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfiguration { reason } => {
                write!(f, "invalid configuration: {reason}")
            }
            Error::Domain { what } => write!(f, "argument outside domain of {what}"),
            Error::Shape { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::InvalidData { index: Some(i), reason } => {
                write!(f, "invalid data at sample {i}: {reason}")
            }
            Error::InvalidData { index: None, reason } => write!(f, "invalid data: {reason}"),
            Error::OverlapViolation { index } => write!(
                f,
                "overlap violation: behavior propensity is zero at logged action of sample {index}"
            ),
            Error::DegenerateWeights => write!(f, "all importance weights are zero"),
            Error::DegenerateFit { reason } => write!(f, "degenerate fit: {reason}"),
            Error::DrNegativeW => write!(
                f,
                "doubly robust moment is nonpositive over the entire feasible range"
            ),
            Error::OptimizationFailure { restarts } => write!(
                f,
                "all {} learning restarts diverged",
                restarts.len()
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
