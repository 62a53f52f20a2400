use super::evaluate::{accuracy, evaluate, evaluate_oracle};
use super::ProtocolError;
use crate::bank::{BankKind, EvidenceRecord, MemoryBank};
use crate::controller::{Arm, BankPolicy, BankSet, PolicyConfig, RetrievalSource};
use crate::stage::Stage;
use crate::worldsim::{EpisodeRef, World};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernanceIteration {
    pub iteration: usize,
    pub fit_accuracy: f64,
    /// `(acc - baseline) / (oracle - baseline)`; absent when the oracle
    /// does not beat the baseline.
    pub gap_close: Option<f64>,
    /// Entries retired by the sweep that produced this iteration.
    pub retired: Vec<String>,
    pub active: BTreeMap<BankKind, usize>,
    pub bank_hashes: BTreeMap<BankKind, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernanceReport {
    pub baseline_accuracy: f64,
    pub oracle_accuracy: f64,
    pub iterations: Vec<GovernanceIteration>,
    pub selected: usize,
}

#[derive(Debug, Clone)]
pub struct GovernanceOutcome {
    pub report: GovernanceReport,
    /// Rule and exemplar banks after each iteration's sweeps.
    pub banks: Vec<(MemoryBank, MemoryBank)>,
}

impl GovernanceOutcome {
    pub fn selected_banks(&self) -> &(MemoryBank, MemoryBank) {
        &self.banks[self.report.selected]
    }
}

fn bank_set(rule: &MemoryBank, exemplar: &MemoryBank) -> BankSet {
    BankSet::new(Some(rule.freeze()), Some(exemplar.freeze()))
}

/// The governed policy never leaves the family placeholder unresolved.
fn reference_policy(policy: &PolicyConfig) -> PolicyConfig {
    let mut p = policy.clone();
    if p.bank_policy == BankPolicy::MultibankBest {
        p.bank_policy = BankPolicy::Dual;
    }
    p
}

/// Paired utilities from exposing each bank on every fit step, merged into
/// one record per (episode, entry) by averaging, in episode order.
fn collect_evidence(
    world: &World,
    episodes: &[EpisodeRef],
    policy: &PolicyConfig,
    banks: &BankSet,
    kind: BankKind,
) -> Result<Vec<(usize, String, f64)>, ProtocolError> {
    let exposure = PolicyConfig {
        bank_policy: BankPolicy::Choose(kind),
        ..policy.clone()
    };
    let traces = evaluate(world, episodes, &exposure, Arm::AlwaysRetrieve, banks, RetrievalSource::Live)?;
    let mut out = Vec::new();
    for t in &traces {
        let mut per_entry: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for s in &t.steps {
            for a in &s.attempts {
                let u = a.second_utility - s.baseline_utility;
                for id in &a.retrieved.retrieved_ids {
                    let slot = per_entry.entry(id).or_insert((0.0, 0));
                    slot.0 += u;
                    slot.1 += 1;
                }
            }
        }
        out.extend(
            per_entry
                .into_iter()
                .map(|(id, (sum, n))| (t.episode_id, id.to_string(), sum / n as f64)),
        );
    }
    Ok(out)
}

fn snapshot_info(
    rule: &MemoryBank,
    exemplar: &MemoryBank,
) -> (BTreeMap<BankKind, usize>, BTreeMap<BankKind, String>) {
    let mut active = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for b in [rule, exemplar] {
        let snap = b.freeze();
        active.insert(b.kind(), snap.entries().len());
        hashes.insert(b.kind(), snap.content_hash().to_string());
    }
    (active, hashes)
}

/// Alternate evaluate, append evidence, and retirement sweep on the fit
/// split. An entry receives at most one record per episode across all
/// rounds, so repeated rounds only add evidence for newly exposed entries.
pub fn run_governance_loop(
    world: &World,
    policy: &PolicyConfig,
    initial: (MemoryBank, MemoryBank),
    rounds: usize,
) -> Result<GovernanceOutcome, ProtocolError> {
    if rounds == 0 {
        return Err(ProtocolError::NoRounds);
    }
    let policy = reference_policy(policy);
    let episodes = world.episodes(Stage::Fit);
    let (mut rule, mut exemplar) = initial;

    let banks0 = bank_set(&rule, &exemplar);
    let baseline = evaluate(world, &episodes, &policy, Arm::Baseline, &banks0, RetrievalSource::Live)?;
    let oracle = evaluate_oracle(world, &episodes, &policy, &banks0, RetrievalSource::Live)?;
    let acc_base = accuracy(&baseline);
    let acc_oracle = accuracy(&oracle);
    let gap_close = |acc: f64| {
        (acc_oracle != acc_base).then(|| (acc - acc_base) / (acc_oracle - acc_base))
    };

    let mut seen: BTreeSet<(usize, String)> = BTreeSet::new();
    let mut iterations = Vec::new();
    let mut snapshots = Vec::new();
    let mut retired = Vec::new();
    for round in 0..=rounds {
        let banks = bank_set(&rule, &exemplar);
        let traces = evaluate(world, &episodes, &policy, Arm::Gated, &banks, RetrievalSource::Live)?;
        let acc = accuracy(&traces);
        let (active, bank_hashes) = snapshot_info(&rule, &exemplar);
        iterations.push(GovernanceIteration {
            iteration: round,
            fit_accuracy: acc,
            gap_close: gap_close(acc),
            retired: std::mem::take(&mut retired),
            active,
            bank_hashes,
        });
        snapshots.push((rule.clone(), exemplar.clone()));
        if round == rounds {
            break;
        }
        for kind in BankKind::ALL {
            let bank = match kind {
                BankKind::Rule => &mut rule,
                BankKind::Exemplar => &mut exemplar,
            };
            if bank.is_empty() {
                continue;
            }
            for (episode_id, id, utility) in collect_evidence(world, &episodes, &policy, &banks, kind)? {
                if seen.insert((episode_id, id.clone())) {
                    bank.append_evidence(
                        &id,
                        EvidenceRecord {
                            episode_id,
                            utility,
                            iteration: round as u32,
                        },
                    )?;
                }
            }
            retired.extend(bank.retirement_sweep(policy.delta)?);
        }
    }

    // best fit accuracy; later iterations win ties
    let selected = iterations
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.fit_accuracy.total_cmp(&b.1.fit_accuracy).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one iteration");
    Ok(GovernanceOutcome {
        report: GovernanceReport {
            baseline_accuracy: acc_base,
            oracle_accuracy: acc_oracle,
            iterations,
            selected,
        },
        banks: snapshots,
    })
}
