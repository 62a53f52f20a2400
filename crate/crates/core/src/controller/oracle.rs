//! Paired upper bound: commit a second pass only when ground truth says it
//! strictly helps.

use super::step::{AcceptanceMode, AttemptRecord, BankSet, EpisodeTrace, RetrievalSource, StepRecord};
use super::{Context, ControllerError, Decode, DecisionEnv, GuardResults, PolicyConfig};
use crate::bank::BankSnapshot;
use crate::retrieval::{retrieve, RetrievalResult};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCandidate {
    /// `None` for the memory-free retry pass.
    pub context: Option<Context>,
    pub retrieved: RetrievalResult,
    pub decode: Decode,
    pub guards: GuardResults,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub query_id: u64,
    pub baseline: Decode,
    pub baseline_utility: f64,
    pub candidates: Vec<OracleCandidate>,
}

/// Per step, commit the best candidate iff its utility strictly exceeds the
/// baseline's; ties keep the earliest candidate.
pub fn oracle_policy(episode_id: usize, steps: &[OracleStep]) -> EpisodeTrace {
    let records = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let best = s
                .candidates
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (j, c)| match acc {
                    Some((_, u)) if u >= c.utility => acc,
                    _ => Some((j, c.utility)),
                })
                .filter(|&(_, u)| u > s.baseline_utility)
                .map(|(j, _)| j);
            let attempts: Vec<AttemptRecord> = s
                .candidates
                .iter()
                .enumerate()
                .map(|(j, c)| AttemptRecord {
                    banks: c.context.map(Context::banks).unwrap_or_default(),
                    mode: AcceptanceMode::Unconditional,
                    retrieved: c.retrieved.clone(),
                    second_action: c.decode.action,
                    second_confidence: c.decode.confidence,
                    second_utility: c.utility,
                    guard_results: c.guards,
                    accepted: best == Some(j),
                    reject_reason: None,
                })
                .collect();
            let (final_action, final_utility) = match best {
                Some(j) => (s.candidates[j].decode.action, s.candidates[j].utility),
                None => (s.baseline.action, s.baseline_utility),
            };
            // keep the committed attempt last so accessors see it
            let mut attempts = attempts;
            if let Some(j) = best {
                let chosen = attempts.remove(j);
                attempts.push(chosen);
            }
            StepRecord {
                step_index: i,
                query_id: s.query_id,
                baseline_action: s.baseline.action,
                baseline_confidence: s.baseline.confidence,
                baseline_utility: s.baseline_utility,
                routed: !attempts.is_empty(),
                accepted: best.is_some(),
                final_action,
                final_utility,
                calls_used: 1 + attempts.len() as u32,
                attempts,
            }
        })
        .collect();
    EpisodeTrace::from_steps(episode_id, records)
}

/// Oracle over every loaded context on every step, with no routing or budget.
/// The candidate set covers every second pass any policy family can make
/// with the same retrieval settings, so the result dominates them pointwise.
pub fn oracle_episode(
    env: &dyn DecisionEnv,
    episode_id: usize,
    query_ids: &[u64],
    policy: &PolicyConfig,
    banks: &BankSet,
    source: RetrievalSource<'_>,
) -> Result<EpisodeTrace, ControllerError> {
    let signal = policy.confidence_signal;
    let contexts: Vec<Context> = Context::ALL
        .into_iter()
        .filter(|c| c.banks().iter().all(|&b| banks.get(b).is_ok()))
        .collect();
    let mut steps = Vec::with_capacity(query_ids.len());
    for &q in query_ids {
        let baseline = env.baseline(q, signal);
        let query = env.query(q);
        let mut candidates = Vec::new();
        for &ctx in &contexts {
            let snaps: Vec<&BankSnapshot> =
                ctx.banks().iter().map(|&b| banks.get(b)).collect::<Result<_, _>>()?;
            let retrieved = match source {
                RetrievalSource::Live => {
                    let parts = snaps
                        .iter()
                        .map(|s| retrieve(query, s, policy.retrieval_threshold, policy.k_max))
                        .collect::<Result<Vec<_>, _>>()?;
                    RetrievalResult::merged(q, parts)
                }
                RetrievalSource::Frozen(map) => RetrievalResult {
                    query_id: q,
                    retrieved_ids: map.lookup(q)?.to_vec(),
                    similarities: Vec::new(),
                },
            };
            if retrieved.is_empty() {
                continue;
            }
            let injected: Vec<_> = retrieved
                .retrieved_ids
                .iter()
                .filter_map(|id| snaps.iter().find_map(|s| s.get(id)))
                .collect();
            if injected.is_empty() {
                continue;
            }
            let sp = env.second_pass(q, signal, ctx, &injected);
            candidates.push(OracleCandidate {
                context: Some(ctx),
                retrieved,
                decode: sp.decode,
                guards: sp.guards,
                utility: env.utility(q, sp.decode.action),
            });
        }
        let retry = env.retry(q, signal);
        candidates.push(OracleCandidate {
            context: None,
            retrieved: RetrievalResult::empty(q),
            decode: retry,
            guards: GuardResults::PASS,
            utility: env.utility(q, retry.action),
        });
        steps.push(OracleStep {
            query_id: q,
            baseline_utility: env.utility(q, baseline.action),
            baseline,
            candidates,
        });
    }
    Ok(oracle_policy(episode_id, &steps))
}
