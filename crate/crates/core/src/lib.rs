//! Training-free applicability control for prompt memory.
//!
//! A baseline decoder proposes an action with a confidence. Low-confidence
//! steps are routed to a memory-conditioned second pass, whose proposal is
//! committed only if it clears a confidence margin and a set of structural
//! guards; otherwise the controller rolls back to the baseline. Memory banks
//! are maintained offline from paired utility evidence and frozen before
//! evaluation.
//!
//! - [`bank`]: memory entries, evidence, Hoeffding retirement, snapshots.
//! - [`retrieval`]: cosine retrieval, frozen identities, content edits.
//! - [`controller`]: routing, acceptance, bank policies, budgets, oracle.
//! - [`worldsim`]: synthetic task world standing in for a language model.
//! - [`stats`]: paired tests, bootstrap, AUC, calibration, permutation test.
//! - [`protocol`]: fit/test freeze, governance, counterfactual replay, ledgers.

pub mod bank;
pub mod config;
pub mod controller;
pub mod keyed;
pub mod retrieval;
pub mod stage;
pub mod stats;
pub mod protocol;
pub mod worldsim;
