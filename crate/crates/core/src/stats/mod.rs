//! Paired statistics and confidence diagnostics.
//!
//! Everything here is a pure function of its inputs; resampling procedures
//! take an explicit seed and build their own generator.

mod auc;
mod calibration;
mod paired;
mod permutation;

pub use auc::roc_auc;
pub use calibration::{
    calibration_metrics, platt_fit, reliability_bins, CalibrationMetrics, CalibrationSet,
    PlattModel, ReliabilityBin, NLL_CLAMP,
};
pub use paired::{
    binomial_cdf_half, bootstrap_ci, mcnemar_exact, PairedComparison, DEFAULT_ALPHA,
    DEFAULT_RESAMPLES,
};
pub use permutation::{randomization_interaction_test, PermutationResult};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("both classes must be present")]
    SingleClass,
    #[error("need at least {min} resamples, got {got}")]
    TooFewResamples { min: usize, got: usize },
    #[error("alpha {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("bin count must be positive")]
    ZeroBins,
    #[error("Newton iteration did not converge after {0} steps")]
    NonConvergence(usize),
}
