use super::ProtocolError;
use crate::bank::BankKind;
use crate::controller::{BankPolicy, BankSet, ConfidenceSignal, PolicyConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which fit-stage choices produced the frozen policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub tau: f64,
    /// Set when tau was derived from a percentile of fit confidences.
    pub percentile: Option<f64>,
    pub margin_m: f64,
    pub bank_policy: BankPolicy,
    /// Differs from `bank_policy` when a family placeholder was resolved.
    pub requested_bank_policy: BankPolicy,
    pub confidence_signal: ConfidenceSignal,
    pub budget_b: Option<u32>,
    pub governance_iteration: usize,
    pub fit_delta_acc: f64,
    pub fit_delta_calls: f64,
    pub fit_score: f64,
    pub candidates_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeManifest {
    pub policy_hash: String,
    pub bank_hashes: BTreeMap<BankKind, String>,
    pub world_hash: String,
    pub selection_record: SelectionRecord,
}

fn mismatch(what: impl Into<String>, expected: &str, got: &str) -> ProtocolError {
    ProtocolError::ManifestMismatch {
        what: what.into(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

impl FreezeManifest {
    /// Reject any input that hashes differently from what was frozen.
    pub fn validate(
        &self,
        policy: &PolicyConfig,
        banks: &BankSet,
        world_hash: &str,
    ) -> Result<(), ProtocolError> {
        let ph = policy.hash();
        if ph != self.policy_hash {
            return Err(mismatch("policy", &self.policy_hash, &ph));
        }
        if world_hash != self.world_hash {
            return Err(mismatch("world", &self.world_hash, world_hash));
        }
        for snap in banks.iter() {
            let Some(expected) = self.bank_hashes.get(&snap.kind()) else {
                return Err(mismatch(format!("{} bank", snap.kind()), "absent", snap.content_hash()));
            };
            if expected != snap.content_hash() {
                return Err(mismatch(format!("{} bank", snap.kind()), expected, snap.content_hash()));
            }
        }
        for &kind in self.bank_hashes.keys() {
            if banks.get(kind).is_err() {
                return Err(ProtocolError::MissingBank(kind));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
