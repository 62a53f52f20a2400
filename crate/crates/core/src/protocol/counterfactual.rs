use super::evaluate::evaluate;
use super::ProtocolError;
use crate::controller::{Arm, BankSet, EpisodeTrace, PolicyConfig, RetrievalSource, StepRecord};
use crate::keyed::derive_key;
use crate::retrieval::{
    apply_edits, freeze_identities, target_hit_partition, ContentEdit, EditKind,
    FrozenRetrievalMap,
};
use crate::stage::Stage;
use crate::stats::{randomization_interaction_test, PermutationResult};
use crate::worldsim::World;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Edited banks with live retrieval; identities may drift.
    Free,
    /// Edited banks with the original identities replayed.
    Fixed,
}

/// Outcomes of one originally routed query under every edit and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRow {
    pub query_id: u64,
    pub routed: bool,
    pub frozen_identity: Vec<String>,
    pub outcome_original: f64,
    pub outcome_repair_free: f64,
    pub outcome_corrupt_free: f64,
    pub outcome_repair_fixed: f64,
    pub outcome_corrupt_fixed: f64,
    pub target_hit: bool,
}

impl CounterfactualRow {
    fn outcome(&self, kind: EditKind, mode: ReplayMode) -> f64 {
        match (kind, mode) {
            (EditKind::Repair, ReplayMode::Free) => self.outcome_repair_free,
            (EditKind::Corrupt, ReplayMode::Free) => self.outcome_corrupt_free,
            (EditKind::Repair, ReplayMode::Fixed) => self.outcome_repair_fixed,
            (EditKind::Corrupt, ReplayMode::Fixed) => self.outcome_corrupt_fixed,
        }
    }

    /// `(free contrast, content term, drift term)` for one edit under one
    /// mode's contrast.
    pub fn terms(&self, kind: EditKind, mode: ReplayMode) -> (f64, f64, f64) {
        let y = self.outcome(kind, mode);
        let fixed = self.outcome(kind, ReplayMode::Fixed);
        (y - self.outcome_original, fixed - self.outcome_original, y - fixed)
    }
}

/// Sums of the decomposition terms over all rows for one (edit, mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionAudit {
    pub edit_kind: EditKind,
    pub mode: ReplayMode,
    pub rows: usize,
    pub free_contrast: f64,
    pub content_term: f64,
    pub drift_term: f64,
    /// Largest `|free - (content + drift)|` over rows; always zero.
    pub max_residual: f64,
    /// Rows whose drift term is nonzero.
    pub drifted_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub rows: Vec<CounterfactualRow>,
    pub audits: Vec<DecompositionAudit>,
    pub hit_rows: usize,
    pub non_hit_rows: usize,
    /// Mean repair-minus-corrupt outcome under fixed retrieval.
    pub hit_delta_acc: f64,
    pub non_hit_delta_acc: f64,
    pub interaction: Option<PermutationResult>,
}

impl CounterfactualReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "query_id,routed,frozen_identity,outcome_original,outcome_repair_free,outcome_corrupt_free,outcome_repair_fixed,outcome_corrupt_fixed,target_hit\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.query_id,
                r.routed,
                r.frozen_identity.join(";"),
                r.outcome_original,
                r.outcome_repair_free,
                r.outcome_corrupt_free,
                r.outcome_repair_fixed,
                r.outcome_corrupt_fixed,
                r.target_hit
            ));
        }
        out
    }
}

/// Apply each edit to whichever bank holds its entry.
fn edit_banks(banks: &BankSet, edits: &[ContentEdit]) -> Result<BankSet, ProtocolError> {
    let mut out = banks.clone();
    for snap in banks.iter() {
        let mine: Vec<ContentEdit> = edits.iter().filter(|e| snap.contains(&e.entry_id)).cloned().collect();
        out.set(apply_edits(snap, &mine)?);
    }
    for e in edits {
        if !banks.iter().any(|s| s.contains(&e.entry_id)) {
            return Err(crate::retrieval::RetrievalError::UnknownEntry(e.entry_id.clone()).into());
        }
    }
    Ok(out)
}

fn reembed_banks(world: &World, banks: &BankSet) -> BankSet {
    let mut out = banks.clone();
    for snap in banks.iter() {
        out.set(world.reembed(snap));
    }
    out
}

fn step_map(traces: &[EpisodeTrace]) -> BTreeMap<u64, &StepRecord> {
    traces.iter().flat_map(|t| &t.steps).map(|s| (s.query_id, s)).collect()
}

/// Bitwise comparison, so that `-0.0` and `0.0` or NaN payloads are not
/// conflated.
fn same_bits(a: &StepRecord, b: &StepRecord) -> bool {
    let bits = |s: &StepRecord| {
        let mut v = vec![
            s.baseline_confidence.to_bits(),
            s.baseline_utility.to_bits(),
            s.final_utility.to_bits(),
        ];
        for at in &s.attempts {
            v.push(at.second_confidence.to_bits());
            v.push(at.second_utility.to_bits());
            v.extend(at.retrieved.similarities.iter().map(|x| x.to_bits()));
        }
        v
    };
    a == b && bits(a) == bits(b)
}

/// Replay the frozen policy on test episodes under repair and corrupt
/// content, with free and with fixed retrieval, and audit the
/// decomposition on every originally routed query.
pub fn run_counterfactual(
    world: &World,
    policy: &PolicyConfig,
    banks: &BankSet,
    repair: &[ContentEdit],
    corrupt: &[ContentEdit],
    n_permutations: usize,
    seed: u64,
) -> Result<CounterfactualReport, ProtocolError> {
    if policy.bank_policy.is_cascade() {
        return Err(ProtocolError::UnsupportedCounterfactual(policy.bank_policy));
    }
    let episodes = world.episodes(Stage::Test);
    let original = evaluate(world, &episodes, policy, Arm::Gated, banks, RetrievalSource::Live)?;
    let frozen: FrozenRetrievalMap = freeze_identities(&original)?;
    let edited_ids: BTreeSet<String> = repair.iter().chain(corrupt).map(|e| e.entry_id.clone()).collect();
    let (hits, _) = target_hit_partition(&frozen, &edited_ids);
    let hits: BTreeSet<u64> = hits.into_iter().collect();

    let mut runs: BTreeMap<(EditKind, ReplayMode), Vec<EpisodeTrace>> = BTreeMap::new();
    for (kind, edits) in [(EditKind::Repair, repair), (EditKind::Corrupt, corrupt)] {
        let edited = edit_banks(banks, edits)?;
        let drifted = reembed_banks(world, &edited);
        runs.insert(
            (kind, ReplayMode::Free),
            evaluate(world, &episodes, policy, Arm::Gated, &drifted, RetrievalSource::Live)?,
        );
        runs.insert(
            (kind, ReplayMode::Fixed),
            evaluate(world, &episodes, policy, Arm::Gated, &edited, RetrievalSource::Frozen(&frozen))?,
        );
    }
    // replaying the original content under the frozen identities must
    // reproduce the original run exactly
    let replay = evaluate(world, &episodes, policy, Arm::Gated, banks, RetrievalSource::Frozen(&frozen))?;
    if replay != original {
        return Err(ProtocolError::Decomposition {
            query_id: 0,
            what: "frozen replay of the original bank differs from the original run".into(),
        });
    }

    let orig = step_map(&original);
    let maps: BTreeMap<(EditKind, ReplayMode), BTreeMap<u64, &StepRecord>> =
        runs.iter().map(|(k, t)| (*k, step_map(t))).collect();
    let get = |kind, mode, q: u64| maps[&(kind, mode)][&q];

    let mut rows = Vec::new();
    for (&q, ids) in &frozen.0 {
        let base = orig[&q];
        for (kind, mode) in maps.keys() {
            if !get(*kind, *mode, q).routed {
                return Err(ProtocolError::Decomposition {
                    query_id: q,
                    what: format!("not routed under {kind:?}/{mode:?}"),
                });
            }
        }
        let target_hit = hits.contains(&q);
        let rf = get(EditKind::Repair, ReplayMode::Fixed, q);
        let cf = get(EditKind::Corrupt, ReplayMode::Fixed, q);
        if !target_hit && !same_bits(rf, cf) {
            return Err(ProtocolError::Decomposition {
                query_id: q,
                what: "non-hit row differs between repair and corrupt under fixed retrieval".into(),
            });
        }
        rows.push(CounterfactualRow {
            query_id: q,
            routed: base.routed,
            frozen_identity: ids.clone(),
            outcome_original: base.final_utility,
            outcome_repair_free: get(EditKind::Repair, ReplayMode::Free, q).final_utility,
            outcome_corrupt_free: get(EditKind::Corrupt, ReplayMode::Free, q).final_utility,
            outcome_repair_fixed: rf.final_utility,
            outcome_corrupt_fixed: cf.final_utility,
            target_hit,
        });
    }

    let mut audits = Vec::new();
    for kind in [EditKind::Repair, EditKind::Corrupt] {
        for mode in [ReplayMode::Free, ReplayMode::Fixed] {
            let mut a = DecompositionAudit {
                edit_kind: kind,
                mode,
                rows: rows.len(),
                free_contrast: 0.0,
                content_term: 0.0,
                drift_term: 0.0,
                max_residual: 0.0,
                drifted_rows: 0,
            };
            for r in &rows {
                let (free, content, drift) = r.terms(kind, mode);
                let residual = free - (content + drift);
                if residual != 0.0 {
                    return Err(ProtocolError::Decomposition {
                        query_id: r.query_id,
                        what: format!("residual {residual} under {kind:?}/{mode:?}"),
                    });
                }
                if mode == ReplayMode::Fixed && drift != 0.0 {
                    return Err(ProtocolError::Decomposition {
                        query_id: r.query_id,
                        what: "nonzero drift under fixed retrieval".into(),
                    });
                }
                a.free_contrast += free;
                a.content_term += content;
                a.drift_term += drift;
                a.drifted_rows += (drift != 0.0) as usize;
            }
            audits.push(a);
        }
    }

    let diff = |r: &CounterfactualRow| r.outcome_repair_fixed - r.outcome_corrupt_fixed;
    let hit_diffs: Vec<f64> = rows.iter().filter(|r| r.target_hit).map(diff).collect();
    let non_hit_diffs: Vec<f64> = rows.iter().filter(|r| !r.target_hit).map(diff).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let interaction = if hit_diffs.is_empty() || non_hit_diffs.is_empty() {
        None
    } else {
        Some(randomization_interaction_test(
            &hit_diffs,
            &non_hit_diffs,
            n_permutations,
            derive_key("interaction", &[seed]),
        )?)
    };
    Ok(CounterfactualReport {
        hit_rows: hit_diffs.len(),
        non_hit_rows: non_hit_diffs.len(),
        hit_delta_acc: mean(&hit_diffs),
        non_hit_delta_acc: mean(&non_hit_diffs),
        interaction,
        rows,
        audits,
    })
}

/// Split a mixed edit list by kind.
pub fn split_edits(edits: &[ContentEdit]) -> (Vec<ContentEdit>, Vec<ContentEdit>) {
    edits.iter().cloned().partition(|e| e.edit_kind == EditKind::Repair)
}
