use super::evaluate::{accuracy, evaluate, mean_calls};
use super::experiment::ExperimentConfig;
use super::governance::{run_governance_loop, GovernanceReport};
use super::manifest::{FreezeManifest, SelectionRecord};
use super::ProtocolError;
use crate::bank::MemoryBank;
use crate::controller::{
    select_threshold_percentile, Arm, BankPolicy, BankSet, ConfidenceSignal, DecisionEnv,
    PolicyConfig, RetrievalSource,
};
use crate::stage::Stage;
use crate::worldsim::{EpisodeRef, World};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub policy: PolicyConfig,
    pub requested_bank_policy: BankPolicy,
    pub percentile: Option<f64>,
    pub fit_accuracy: f64,
    pub delta_acc: f64,
    pub delta_calls: f64,
    pub score: f64,
}

impl CandidateScore {
    /// Higher score, then fewer calls, then earlier in enumeration order.
    fn better_than(&self, other: &Self) -> bool {
        match self.score.total_cmp(&other.score) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match other.delta_calls.total_cmp(&self.delta_calls) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => self.index < other.index,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub manifest: FreezeManifest,
    pub policy: PolicyConfig,
    /// Selected-iteration banks, sealed against further mutation.
    pub rule: MemoryBank,
    pub exemplar: MemoryBank,
    pub governance: GovernanceReport,
    pub candidates: Vec<CandidateScore>,
}

struct Candidate {
    policy: PolicyConfig,
    percentile: Option<f64>,
}

fn sorted_unique<T: Copy + PartialOrd>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite grid values"));
    v.dedup_by(|a, b| a == b);
    v
}

fn enumerate_candidates(
    world: &World,
    episodes: &[EpisodeRef],
    cfg: &ExperimentConfig,
) -> Result<Vec<Candidate>, ProtocolError> {
    let g = &cfg.grid;
    let policies: BTreeSet<BankPolicy> = g.bank_policies.iter().copied().collect();
    let signals: BTreeSet<ConfidenceSignal> = g.signals.iter().copied().collect();
    let margins = sorted_unique(&g.margins);
    // bounded budgets ascending, unlimited last
    let mut budgets = g.budgets.clone();
    budgets.sort_by_key(|b| (b.is_none(), *b));
    budgets.dedup();

    let mut out = Vec::new();
    for &bank_policy in &policies {
        for &signal in &signals {
            let thresholds: Vec<(f64, Option<f64>)> = match &g.percentiles {
                Some(ps) => {
                    let conf: Vec<f64> = episodes
                        .iter()
                        .flat_map(|e| e.query_ids.iter())
                        .map(|&q| world.baseline(q, signal).confidence)
                        .collect();
                    sorted_unique(ps)
                        .into_iter()
                        .map(|p| Ok((select_threshold_percentile(&conf, p)?, Some(p))))
                        .collect::<Result<_, ProtocolError>>()?
                }
                None => sorted_unique(&g.taus).into_iter().map(|t| (t, None)).collect(),
            };
            for &(tau, percentile) in &thresholds {
                for &margin_m in &margins {
                    for &budget_b in &budgets {
                        let policy = PolicyConfig {
                            tau,
                            margin_m,
                            bank_policy,
                            confidence_signal: signal,
                            budget_b,
                            ..cfg.policy.clone()
                        };
                        policy.validate()?;
                        out.push(Candidate { policy, percentile });
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(ProtocolError::EmptyGrid);
    }
    Ok(out)
}

fn score_policy(
    world: &World,
    episodes: &[EpisodeRef],
    policy: &PolicyConfig,
    banks: &BankSet,
    base: (f64, f64),
) -> Result<(f64, f64, f64), ProtocolError> {
    let traces = evaluate(world, episodes, policy, Arm::Gated, banks, RetrievalSource::Live)?;
    let acc = accuracy(&traces);
    let d_calls = mean_calls(&traces) - base.1;
    Ok((acc, acc - base.0, d_calls))
}

/// Governance on fit evidence, then a grid search on fit episodes, then
/// the freeze. Nothing here looks at test episodes.
pub fn run_fit_stage(world: &World, cfg: &ExperimentConfig) -> Result<FitOutput, ProtocolError> {
    let fit = world.episodes(Stage::Fit);
    let test = world.episodes(Stage::Test);
    let fit_examples: BTreeSet<usize> = fit.iter().map(|e| e.example).collect();
    let overlap = test.iter().filter(|e| fit_examples.contains(&e.example)).count();
    if overlap > 0 {
        return Err(ProtocolError::OverlappingSplits(overlap));
    }

    let governed = run_governance_loop(
        world,
        &cfg.policy,
        world.initial_banks()?,
        cfg.settings.governance_rounds,
    )?;
    let (rule, exemplar) = governed.selected_banks().clone();
    let banks = BankSet::new(Some(rule.freeze()), Some(exemplar.freeze()));

    let baseline = evaluate(world, &fit, &cfg.policy, Arm::Baseline, &banks, RetrievalSource::Live)?;
    let base = (accuracy(&baseline), mean_calls(&baseline));
    let lambda = cfg.policy.lambda;

    let candidates = enumerate_candidates(world, &fit, cfg)?;
    let scores = candidates
        .par_iter()
        .enumerate()
        .map(|(index, c)| -> Result<CandidateScore, ProtocolError> {
            let members: Vec<BankPolicy> = match c.policy.bank_policy {
                BankPolicy::MultibankBest => BankPolicy::MULTIBANK_MEMBERS.to_vec(),
                p => vec![p],
            };
            let mut best: Option<CandidateScore> = None;
            for (k, member) in members.into_iter().enumerate() {
                let policy = PolicyConfig {
                    bank_policy: member,
                    ..c.policy.clone()
                };
                let (fit_accuracy, delta_acc, delta_calls) =
                    score_policy(world, &fit, &policy, &banks, base)?;
                let s = CandidateScore {
                    index: k,
                    policy,
                    requested_bank_policy: c.policy.bank_policy,
                    percentile: c.percentile,
                    fit_accuracy,
                    delta_acc,
                    delta_calls,
                    score: delta_acc - lambda * delta_calls,
                };
                if best.as_ref().is_none_or(|b| s.better_than(b)) {
                    best = Some(s);
                }
            }
            let mut s = best.expect("nonempty family");
            s.index = index;
            Ok(s)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let chosen = scores
        .iter()
        .fold(None::<&CandidateScore>, |acc, s| match acc {
            Some(b) if !s.better_than(b) => Some(b),
            _ => Some(s),
        })
        .expect("nonempty grid")
        .clone();

    let mut rule = rule;
    let mut exemplar = exemplar;
    rule.seal();
    exemplar.seal();
    let policy = chosen.policy.clone();
    let manifest = FreezeManifest {
        policy_hash: policy.hash(),
        bank_hashes: banks
            .iter()
            .map(|s| (s.kind(), s.content_hash().to_string()))
            .collect(),
        world_hash: world.hash(),
        selection_record: SelectionRecord {
            tau: policy.tau,
            percentile: chosen.percentile,
            margin_m: policy.margin_m,
            bank_policy: policy.bank_policy,
            requested_bank_policy: chosen.requested_bank_policy,
            confidence_signal: policy.confidence_signal,
            budget_b: policy.budget_b,
            governance_iteration: governed.report.selected,
            fit_delta_acc: chosen.delta_acc,
            fit_delta_calls: chosen.delta_calls,
            fit_score: chosen.score,
            candidates_evaluated: scores.len(),
        },
    };
    Ok(FitOutput {
        manifest,
        policy,
        rule,
        exemplar,
        governance: governed.report,
        candidates: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{BankError, BankKind, EvidenceRecord};
    use crate::protocol::{Grid, ProtocolSettings};
    use crate::worldsim::WorldSpec;

    fn cfg(world: WorldSpec, grid: Grid) -> ExperimentConfig {
        ExperimentConfig {
            world,
            grid,
            policy: PolicyConfig::default(),
            settings: ProtocolSettings {
                governance_rounds: 1,
                ..ProtocolSettings::default()
            },
        }
    }

    fn small() -> WorldSpec {
        WorldSpec {
            seed: 12,
            n_examples: 200,
            decode_seeds: 1,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn single_candidate_is_selected_and_banks_are_sealed() {
        let c = cfg(small(), Grid::single(&PolicyConfig::default()));
        let w = World::generate(&c.world).unwrap();
        let mut out = run_fit_stage(&w, &c).unwrap();
        assert_eq!(out.candidates.len(), 1);
        assert_eq!(out.policy, PolicyConfig::default());
        assert_eq!(out.manifest.policy_hash, out.policy.hash());
        assert_eq!(out.manifest.world_hash, w.hash());
        let r = out.rule.append_evidence(
            "R0",
            EvidenceRecord {
                episode_id: 0,
                utility: 0.0,
                iteration: 0,
            },
        );
        assert!(matches!(r, Err(BankError::ProtocolViolation { .. })));
        assert!(out.rule.retirement_sweep(0.05).is_err());
    }

    #[test]
    fn zero_budget_wins_when_memory_never_helps() {
        let world = WorldSpec {
            help_prob_given_applicable: 0.0,
            ..small()
        };
        let grid = Grid {
            budgets: vec![None, Some(2), Some(0)],
            taus: vec![0.3, 0.6],
            ..Grid::single(&PolicyConfig::default())
        };
        let c = cfg(world, grid);
        let w = World::generate(&c.world).unwrap();
        let out = run_fit_stage(&w, &c).unwrap();
        assert_eq!(out.candidates.len(), 6);
        assert_eq!(out.policy.budget_b, Some(0));
        assert_eq!(out.manifest.selection_record.fit_delta_calls, 0.0);
        // tau 0.3 comes first in enumeration order
        assert_eq!(out.policy.tau, 0.3);
    }

    #[test]
    fn multibank_placeholder_resolves_to_a_member() {
        let grid = Grid {
            bank_policies: vec![BankPolicy::MultibankBest],
            ..Grid::single(&PolicyConfig::default())
        };
        let c = cfg(small(), grid);
        let w = World::generate(&c.world).unwrap();
        let out = run_fit_stage(&w, &c).unwrap();
        assert!(BankPolicy::MULTIBANK_MEMBERS.contains(&out.policy.bank_policy));
        assert_eq!(out.manifest.selection_record.requested_bank_policy, BankPolicy::MultibankBest);
    }

    #[test]
    fn percentile_grid_routes_close_to_the_target_fraction() {
        let grid = Grid {
            percentiles: Some(vec![35.0]),
            ..Grid::single(&PolicyConfig::default())
        };
        let world = WorldSpec {
            n_examples: 1200,
            ..small()
        };
        let c = cfg(world, grid);
        let w = World::generate(&c.world).unwrap();
        let out = run_fit_stage(&w, &c).unwrap();
        let fit = w.episodes(Stage::Fit);
        let routed = fit
            .iter()
            .filter(|e| w.baseline(e.query_ids[0], out.policy.confidence_signal).confidence < out.policy.tau)
            .count() as f64
            / fit.len() as f64;
        assert!((0.30..=0.40).contains(&routed), "{routed}");
        assert_eq!(out.manifest.selection_record.percentile, Some(35.0));
    }

    #[test]
    fn strongly_toxic_entry_is_excluded_from_the_frozen_bank() {
        let world = WorldSpec {
            toxic_fraction: 0.05,
            rule_bank_size: 20,
            n_examples: 400,
            ..small()
        };
        let c = cfg(world, Grid::single(&PolicyConfig::default()));
        let w = World::generate(&c.world).unwrap();
        let toxic: Vec<String> = w
            .entries()
            .filter(|(_, e)| e.toxic && e.kind == BankKind::Rule)
            .map(|(id, _)| id.clone())
            .collect();
        assert_eq!(toxic.len(), 1);
        let out = run_fit_stage(&w, &c).unwrap();
        let frozen = out.rule.freeze();
        assert!(!frozen.contains(&toxic[0]));
        let entry = out.rule.get(&toxic[0]).unwrap();
        assert!(entry.evidence_count() >= 8);
        assert!(entry.mean_utility().unwrap() < -0.5);
    }
}
