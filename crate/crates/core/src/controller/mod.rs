//! Per-step applicability control: routing, memory-conditioned second pass,
//! guarded acceptance with rollback, bank composition, and budget discipline.
//!
//! The controller never sees ground truth directly. Everything it knows about
//! the task comes through a [`DecisionEnv`], which the simulator implements.

mod contracts;
mod oracle;
mod policy;
mod step;

pub use contracts::{verify_trace, ContractViolation};
pub use oracle::{oracle_episode, oracle_policy, OracleCandidate, OracleStep};
pub use policy::{
    BankPolicy, Budget, ConfidenceSignal, Guard, GuardResults, GuardSet, PolicyConfig,
};
pub use step::{
    accept_decision, compose_bank_policy, route_decision, run_episode, run_step,
    select_threshold_percentile, AcceptanceMode, Arm, Attempt, AttemptRecord, BankSet,
    BudgetState, EpisodeTrace, RejectReason, RetrievalSource, StepRecord,
};

use crate::bank::{BankKind, SnapshotEntry};
use crate::retrieval::{Query, RetrievalError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("bank policy needs the {0} bank, which is not loaded")]
    MissingBank(BankKind),
    #[error("multibank_best must be resolved to a member family before use")]
    UnresolvedMultibank,
    #[error("acceptance needs second-pass confidence and guard results")]
    MissingSecondPass,
    #[error("threshold selection needs at least one confidence")]
    EmptyConfidences,
    #[error("percentile {0} outside [0, 100]")]
    InvalidPercentile(f64),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Opaque task action. Equality is all the controller needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub i64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decode {
    pub action: Action,
    pub confidence: f64,
}

/// Which banks fed a second pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    Rule,
    Exemplar,
    Dual,
}

impl Context {
    pub const ALL: [Context; 3] = [Context::Rule, Context::Exemplar, Context::Dual];

    pub fn from_banks(banks: &[BankKind]) -> Option<Context> {
        let rule = banks.contains(&BankKind::Rule);
        let exemplar = banks.contains(&BankKind::Exemplar);
        match (rule, exemplar) {
            (true, true) => Some(Context::Dual),
            (true, false) => Some(Context::Rule),
            (false, true) => Some(Context::Exemplar),
            (false, false) => None,
        }
    }

    pub fn banks(self) -> Vec<BankKind> {
        match self {
            Context::Rule => vec![BankKind::Rule],
            Context::Exemplar => vec![BankKind::Exemplar],
            Context::Dual => vec![BankKind::Rule, BankKind::Exemplar],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Context::Rule => "rule",
            Context::Exemplar => "exemplar",
            Context::Dual => "dual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondPass {
    pub decode: Decode,
    pub guards: GuardResults,
}

/// The task side of the loop: decoders, structural guards, and utilities.
pub trait DecisionEnv: Sync {
    fn query(&self, query_id: u64) -> &Query;
    fn baseline(&self, query_id: u64, signal: ConfidenceSignal) -> Decode;
    /// Second pass with the same context and no memory.
    fn retry(&self, query_id: u64, signal: ConfidenceSignal) -> Decode;
    /// Memory-conditioned second pass. `injected` may be empty.
    fn second_pass(
        &self,
        query_id: u64,
        signal: ConfidenceSignal,
        context: Context,
        injected: &[&SnapshotEntry],
    ) -> SecondPass;
    fn utility(&self, query_id: u64, action: Action) -> f64;
}
