//! The locked fit-then-test protocol.
//!
//! The fit stage runs governance rounds over fit episodes, grid-searches the
//! control knobs, and emits a [`FreezeManifest`] binding the selected policy,
//! the frozen banks, and the world. The test stage refuses to run unless
//! every input hashes to what the manifest recorded, and never mutates
//! anything. Counterfactual replay re-runs a frozen policy under edited bank
//! content, both with free retrieval and with frozen identities, and audits
//! the free/content/drift decomposition row by row.

mod counterfactual;
mod evaluate;
mod experiment;
mod fit;
mod governance;
mod ledger;
mod manifest;
mod test_stage;

pub use counterfactual::{
    run_counterfactual, split_edits, CounterfactualReport, CounterfactualRow, DecompositionAudit, ReplayMode,
};
pub use evaluate::{accuracy, evaluate, evaluate_oracle, mean_calls, outcomes, step_fractions};
pub use experiment::{ExperimentConfig, Grid, ProtocolSettings};
pub use fit::{run_fit_stage, CandidateScore, FitOutput};
pub use governance::{run_governance_loop, GovernanceIteration, GovernanceOutcome, GovernanceReport};
pub use ledger::{check_row, ledger_check, write_ledger_csv, LedgerCheck, LedgerRow, LEDGER_HEADER};
pub use manifest::{FreezeManifest, SelectionRecord};
pub use test_stage::{run_test_stage, CalibrationReport, ConfBinRow, TestReport};

use crate::bank::{BankError, BankKind};
use crate::config::ConfigError;
use crate::controller::{BankPolicy, ContractViolation, ControllerError};
use crate::retrieval::RetrievalError;
use crate::stats::StatsError;
use crate::worldsim::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("manifest mismatch on {what}: frozen {expected}, got {got}")]
    ManifestMismatch {
        what: String,
        expected: String,
        got: String,
    },
    #[error("manifest has no {0} bank")]
    MissingBank(BankKind),
    #[error("fit and test splits share {0} example(s)")]
    OverlappingSplits(usize),
    #[error("candidate grid is empty")]
    EmptyGrid,
    #[error("governance needs at least one round")]
    NoRounds,
    #[error("counterfactual replay needs a single-attempt policy, got {0}")]
    UnsupportedCounterfactual(BankPolicy),
    #[error("decomposition fails on query {query_id}: {what}")]
    Decomposition { query_id: u64, what: String },
    #[error("ledger row `{row}` is inconsistent: {what}")]
    InconsistentRow { row: String, what: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Contract(#[from] ContractViolation),
}
