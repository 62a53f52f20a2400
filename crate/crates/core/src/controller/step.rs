use super::{
    Action, BankPolicy, ConfidenceSignal, Context, ControllerError, DecisionEnv, Guard,
    GuardResults, PolicyConfig,
};
use crate::bank::{BankKind, BankSnapshot, SnapshotEntry};
use crate::retrieval::{
    cosine_similarity, retrieve, FrozenRetrievalMap, RetrievalError, RetrievalResult,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// `c < tau`, strictly.
pub fn route_decision(c: f64, tau: f64) -> bool {
    c < tau
}

/// Nearest-rank percentile: `p = 0` gives the minimum, otherwise the value
/// at rank `ceil(p/100 * n)`.
pub fn select_threshold_percentile(confidences: &[f64], p: f64) -> Result<f64, ControllerError> {
    if confidences.is_empty() {
        return Err(ControllerError::EmptyConfidences);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(ControllerError::InvalidPercentile(p));
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Margin test conjoined with every enabled guard.
pub fn accept_decision(
    c: f64,
    c_prime: Option<f64>,
    margin_m: f64,
    guards: Option<&GuardResults>,
    guards_enabled: &BTreeSet<Guard>,
) -> Result<bool, ControllerError> {
    let (Some(c_prime), Some(guards)) = (c_prime, guards) else {
        return Err(ControllerError::MissingSecondPass);
    };
    Ok(c_prime >= c + margin_m && guards.first_failure(guards_enabled).is_none())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceMode {
    Full,
    /// Guards only.
    MarginBypass,
    /// Commit whatever the second pass produced (no rollback).
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub banks: Vec<BankKind>,
    pub mode: AcceptanceMode,
}

/// The loaded bank snapshots a policy may draw from.
#[derive(Debug, Clone, Default)]
pub struct BankSet {
    pub rule: Option<BankSnapshot>,
    pub exemplar: Option<BankSnapshot>,
}

impl BankSet {
    pub fn new(rule: Option<BankSnapshot>, exemplar: Option<BankSnapshot>) -> Self {
        Self { rule, exemplar }
    }

    pub fn get(&self, kind: BankKind) -> Result<&BankSnapshot, ControllerError> {
        match kind {
            BankKind::Rule => self.rule.as_ref(),
            BankKind::Exemplar => self.exemplar.as_ref(),
        }
        .ok_or(ControllerError::MissingBank(kind))
    }

    pub fn set(&mut self, snapshot: BankSnapshot) {
        match snapshot.kind() {
            BankKind::Rule => self.rule = Some(snapshot),
            BankKind::Exemplar => self.exemplar = Some(snapshot),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &BankSnapshot> {
        self.rule.iter().chain(self.exemplar.iter())
    }
}

/// Ordered second-pass attempts for a bank policy.
pub fn compose_bank_policy(
    policy: BankPolicy,
    banks: &BankSet,
) -> Result<Vec<Attempt>, ControllerError> {
    use BankKind::{Exemplar, Rule};
    let attempt = |banks: Vec<BankKind>, mode| Attempt { banks, mode };
    let attempts = match policy {
        BankPolicy::GateOnly(b) => vec![attempt(vec![b], AcceptanceMode::MarginBypass)],
        BankPolicy::Choose(b) => vec![attempt(vec![b], AcceptanceMode::Full)],
        BankPolicy::CascadeRuleThenExemplar => vec![
            attempt(vec![Rule], AcceptanceMode::Full),
            attempt(vec![Exemplar], AcceptanceMode::Full),
        ],
        BankPolicy::CascadeExemplarThenRule => vec![
            attempt(vec![Exemplar], AcceptanceMode::Full),
            attempt(vec![Rule], AcceptanceMode::Full),
        ],
        BankPolicy::Dual => vec![attempt(vec![Rule, Exemplar], AcceptanceMode::Full)],
        BankPolicy::MultibankBest => return Err(ControllerError::UnresolvedMultibank),
    };
    for a in &attempts {
        for &b in &a.banks {
            banks.get(b)?;
        }
    }
    Ok(attempts)
}

/// Policy families and comparison baselines that share the step loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Never routes.
    Baseline,
    /// Routes like the gated policy but reruns without memory and commits.
    Retry,
    /// The full control stack.
    Gated,
    /// Retrieves on every step and commits without rollback.
    AlwaysRetrieve,
    /// Retrieves on every step up to `k` per episode and commits.
    FixedBudget(u32),
}

impl Arm {
    pub fn name(self) -> String {
        match self {
            Arm::Baseline => "baseline".into(),
            Arm::Retry => "retry".into(),
            Arm::Gated => "gated".into(),
            Arm::AlwaysRetrieve => "always_retrieve".into(),
            Arm::FixedBudget(k) => format!("fixed_budget_k{k}"),
        }
    }

    /// Whether tau, budget_B and cooldown govern routing.
    pub fn uses_gate(self) -> bool {
        matches!(self, Arm::Retry | Arm::Gated)
    }
}

/// Where second-pass identities come from.
#[derive(Debug, Clone, Copy)]
pub enum RetrievalSource<'a> {
    /// Similarity search over the current snapshots.
    Live,
    /// Replay of identities recorded in an earlier run.
    Frozen(&'a FrozenRetrievalMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BudgetState {
    pub routed: u32,
    pub cooldown_left: u32,
}

impl BudgetState {
    fn eligible(&self, cap: Option<u32>) -> bool {
        self.cooldown_left == 0 && cap.is_none_or(|b| self.routed < b)
    }

    fn advance(&mut self, routed: bool, cooldown: u32) {
        if routed {
            self.routed += 1;
            self.cooldown_left = cooldown;
        } else {
            self.cooldown_left = self.cooldown_left.saturating_sub(1);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyRetrieval,
    Margin,
    Guard(Guard),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub banks: Vec<BankKind>,
    pub mode: AcceptanceMode,
    pub retrieved: RetrievalResult,
    pub second_action: Action,
    pub second_confidence: f64,
    pub second_utility: f64,
    pub guard_results: GuardResults,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub query_id: u64,
    pub baseline_action: Action,
    pub baseline_confidence: f64,
    pub baseline_utility: f64,
    pub routed: bool,
    pub attempts: Vec<AttemptRecord>,
    pub accepted: bool,
    pub final_action: Action,
    pub final_utility: f64,
    pub calls_used: u32,
}

impl StepRecord {
    fn last(&self) -> Option<&AttemptRecord> {
        self.attempts.last()
    }

    pub fn retrieved(&self) -> Option<&RetrievalResult> {
        self.last().map(|a| &a.retrieved)
    }

    pub fn second_action(&self) -> Option<Action> {
        self.last().map(|a| a.second_action)
    }

    pub fn second_confidence(&self) -> Option<f64> {
        self.last().map(|a| a.second_confidence)
    }

    pub fn guard_results(&self) -> Option<&GuardResults> {
        self.last().map(|a| &a.guard_results)
    }

    /// Every entry id injected on this step, in attempt order.
    pub fn retrieved_ids(&self) -> impl Iterator<Item = &String> {
        self.attempts.iter().flat_map(|a| &a.retrieved.retrieved_ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode_id: usize,
    pub steps: Vec<StepRecord>,
    /// Mean final utility over steps.
    pub outcome_utility: f64,
    pub routed_count: u32,
    pub accepted_count: u32,
    pub total_calls: u32,
}

impl EpisodeTrace {
    pub fn from_steps(episode_id: usize, steps: Vec<StepRecord>) -> Self {
        let n = steps.len().max(1) as f64;
        Self {
            episode_id,
            outcome_utility: steps.iter().map(|s| s.final_utility).sum::<f64>() / n,
            routed_count: steps.iter().filter(|s| s.routed).count() as u32,
            accepted_count: steps.iter().filter(|s| s.accepted).count() as u32,
            total_calls: steps.iter().map(|s| s.calls_used).sum(),
            steps,
        }
    }

    /// An episode succeeds when every committed step is correct.
    pub fn success(&self) -> bool {
        self.steps.iter().all(|s| s.final_utility >= 1.0)
    }

    pub fn baseline_success(&self) -> bool {
        self.steps.iter().all(|s| s.baseline_utility >= 1.0)
    }
}

fn resolve_injected<'b>(
    ids: &[String],
    attempt_banks: &[&'b BankSnapshot],
) -> Result<Vec<&'b SnapshotEntry>, RetrievalError> {
    ids.iter()
        .map(|id| {
            attempt_banks
                .iter()
                .find_map(|b| b.get(id))
                .ok_or_else(|| RetrievalError::UnknownEntry(id.clone()))
        })
        .collect()
}

fn retrieve_for_attempt<'b>(
    env: &dyn DecisionEnv,
    query_id: u64,
    attempt_banks: &[&'b BankSnapshot],
    policy: &PolicyConfig,
    source: RetrievalSource<'_>,
) -> Result<(RetrievalResult, Vec<&'b SnapshotEntry>), ControllerError> {
    let query = env.query(query_id);
    let retrieved = match source {
        RetrievalSource::Live => {
            let parts = attempt_banks
                .iter()
                .map(|b| retrieve(query, b, policy.retrieval_threshold, policy.k_max))
                .collect::<Result<Vec<_>, _>>()?;
            if parts.len() == 1 {
                parts.into_iter().next().expect("one part")
            } else {
                RetrievalResult::merged(query_id, parts)
            }
        }
        RetrievalSource::Frozen(map) => {
            let ids = map.lookup(query_id)?.to_vec();
            let entries = resolve_injected(&ids, attempt_banks)?;
            let similarities = entries
                .iter()
                .map(|e| cosine_similarity(&query.embedding, &e.embedding))
                .collect();
            RetrievalResult {
                query_id,
                retrieved_ids: ids,
                similarities,
            }
        }
    };
    let injected = resolve_injected(&retrieved.retrieved_ids, attempt_banks)?;
    Ok((retrieved, injected))
}

fn exposure_attempt(policy: &PolicyConfig) -> Attempt {
    Attempt {
        banks: policy.bank_policy.exposure_banks(),
        mode: AcceptanceMode::Unconditional,
    }
}

/// One step of the control loop: baseline decode, route, second pass(es),
/// guarded acceptance, rollback.
#[allow(clippy::too_many_arguments)]
pub fn run_step(
    env: &dyn DecisionEnv,
    step_index: usize,
    query_id: u64,
    policy: &PolicyConfig,
    arm: Arm,
    banks: &BankSet,
    source: RetrievalSource<'_>,
    budget: &mut BudgetState,
) -> Result<StepRecord, ControllerError> {
    let signal: ConfidenceSignal = policy.confidence_signal;
    let base = env.baseline(query_id, signal);
    let baseline_utility = env.utility(query_id, base.action);

    let routed = match arm {
        Arm::Baseline => false,
        Arm::Retry | Arm::Gated => {
            budget.eligible(policy.budget_b) && route_decision(base.confidence, policy.tau)
        }
        Arm::AlwaysRetrieve => true,
        Arm::FixedBudget(k) => budget.routed < k,
    };
    let cooldown = if arm.uses_gate() { policy.cooldown } else { 0 };
    budget.advance(routed, cooldown);

    let mut attempts = Vec::new();
    if routed {
        if arm == Arm::Retry {
            let d = env.retry(query_id, signal);
            attempts.push(AttemptRecord {
                banks: Vec::new(),
                mode: AcceptanceMode::Unconditional,
                retrieved: RetrievalResult::empty(query_id),
                second_action: d.action,
                second_confidence: d.confidence,
                second_utility: env.utility(query_id, d.action),
                guard_results: GuardResults::PASS,
                accepted: true,
                reject_reason: None,
            });
        } else {
            let plan = match arm {
                Arm::Gated => compose_bank_policy(policy.bank_policy, banks)?,
                _ => vec![exposure_attempt(policy)],
            };
            for attempt in plan {
                let attempt_banks = attempt
                    .banks
                    .iter()
                    .map(|&b| banks.get(b))
                    .collect::<Result<Vec<_>, _>>()?;
                let (retrieved, injected) =
                    retrieve_for_attempt(env, query_id, &attempt_banks, policy, source)?;
                let context = Context::from_banks(&attempt.banks).expect("attempt has banks");
                let sp = env.second_pass(query_id, signal, context, &injected);
                let reject_reason = if retrieved.is_empty() {
                    Some(RejectReason::EmptyRetrieval)
                } else {
                    match attempt.mode {
                        AcceptanceMode::Unconditional => None,
                        AcceptanceMode::MarginBypass => {
                            sp.guards.first_failure(&policy.guards_enabled).map(RejectReason::Guard)
                        }
                        AcceptanceMode::Full => {
                            if let Some(g) = sp.guards.first_failure(&policy.guards_enabled) {
                                Some(RejectReason::Guard(g))
                            } else if !accept_decision(
                                base.confidence,
                                Some(sp.decode.confidence),
                                policy.margin_m,
                                Some(&sp.guards),
                                &policy.guards_enabled,
                            )? {
                                Some(RejectReason::Margin)
                            } else {
                                None
                            }
                        }
                    }
                };
                let accepted = reject_reason.is_none();
                attempts.push(AttemptRecord {
                    banks: attempt.banks,
                    mode: attempt.mode,
                    retrieved,
                    second_action: sp.decode.action,
                    second_confidence: sp.decode.confidence,
                    second_utility: env.utility(query_id, sp.decode.action),
                    guard_results: sp.guards,
                    accepted,
                    reject_reason,
                });
                if accepted {
                    break;
                }
            }
        }
    }

    let committed = attempts.last().filter(|a| a.accepted);
    let (final_action, final_utility) = match committed {
        Some(a) => (a.second_action, a.second_utility),
        None => (base.action, baseline_utility),
    };
    Ok(StepRecord {
        step_index,
        query_id,
        baseline_action: base.action,
        baseline_confidence: base.confidence,
        baseline_utility,
        routed,
        accepted: committed.is_some(),
        final_action,
        final_utility,
        calls_used: 1 + attempts.len() as u32,
        attempts,
    })
}

/// Run one episode; steps are strictly sequential and share a budget.
pub fn run_episode(
    env: &dyn DecisionEnv,
    episode_id: usize,
    query_ids: &[u64],
    policy: &PolicyConfig,
    arm: Arm,
    banks: &BankSet,
    source: RetrievalSource<'_>,
) -> Result<EpisodeTrace, ControllerError> {
    let mut budget = BudgetState::default();
    let steps = query_ids
        .iter()
        .enumerate()
        .map(|(i, &q)| run_step(env, i, q, policy, arm, banks, source, &mut budget))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EpisodeTrace::from_steps(episode_id, steps))
}
