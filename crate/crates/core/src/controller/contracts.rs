//! Trace-level checks of the control contracts: rollback safety, budget,
//! cooldown, routing, acceptance, and counter bookkeeping.

use super::step::{route_decision, AcceptanceMode, Arm, EpisodeTrace, RejectReason};
use super::PolicyConfig;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("episode {episode_id}, step {step}: {what}")]
pub struct ContractViolation {
    pub episode_id: usize,
    pub step: usize,
    pub what: String,
}

/// Re-derive every invariant of a trace produced by `run_episode` under
/// `policy` and `arm`.
pub fn verify_trace(
    trace: &EpisodeTrace,
    policy: &PolicyConfig,
    arm: Arm,
) -> Result<(), ContractViolation> {
    let fail = |step: usize, what: String| ContractViolation {
        episode_id: trace.episode_id,
        step,
        what,
    };
    let mut routed_so_far = 0u32;
    let mut cooldown_left = 0u32;
    let single_attempt = !(arm == Arm::Gated && policy.bank_policy.is_cascade());

    for (i, s) in trace.steps.iter().enumerate() {
        if s.step_index != i {
            return Err(fail(i, format!("step_index {}", s.step_index)));
        }
        if s.calls_used != 1 + s.attempts.len() as u32 {
            return Err(fail(i, format!("calls_used {} with {} attempts", s.calls_used, s.attempts.len())));
        }
        if !s.routed {
            if !s.attempts.is_empty() || s.accepted || s.final_action != s.baseline_action || s.calls_used != 1 {
                return Err(fail(i, "unrouted step touched the second pass".into()));
            }
        } else if s.attempts.is_empty() {
            return Err(fail(i, "routed step without a second pass".into()));
        }
        if single_attempt && s.attempts.len() > 1 {
            return Err(fail(i, "more than one attempt".into()));
        }

        // acceptance and rollback
        let committed: Vec<_> = s.attempts.iter().filter(|a| a.accepted).collect();
        if committed.len() > 1 {
            return Err(fail(i, "several attempts accepted".into()));
        }
        if s.accepted != (committed.len() == 1) {
            return Err(fail(i, "accepted flag disagrees with attempts".into()));
        }
        if let Some(pos) = s.attempts.iter().position(|a| a.accepted) {
            if pos + 1 != s.attempts.len() {
                return Err(fail(i, "attempt after an accepted one".into()));
            }
        }
        for a in &s.attempts {
            if a.accepted == a.reject_reason.is_some() {
                return Err(fail(i, "accepted attempt with a reject reason".into()));
            }
            let is_retry = arm == Arm::Retry;
            if a.accepted && !is_retry && a.retrieved.is_empty() {
                return Err(fail(i, "accepted an empty retrieval".into()));
            }
            if !a.accepted {
                continue;
            }
            let guards_ok = a.guard_results.first_failure(&policy.guards_enabled).is_none();
            let ok = match a.mode {
                AcceptanceMode::Full => {
                    guards_ok && a.second_confidence >= s.baseline_confidence + policy.margin_m
                }
                AcceptanceMode::MarginBypass => guards_ok,
                AcceptanceMode::Unconditional => true,
            };
            if !ok {
                return Err(fail(i, format!("accepted under {:?} without meeting it", a.mode)));
            }
        }
        for a in s.attempts.iter().filter(|a| !a.accepted) {
            if a.reject_reason == Some(RejectReason::Margin) && a.mode != AcceptanceMode::Full {
                return Err(fail(i, "margin rejection outside full acceptance".into()));
            }
        }
        match committed.first() {
            Some(a) => {
                if s.final_action != a.second_action || s.final_utility != a.second_utility {
                    return Err(fail(i, "final output is not the accepted second pass".into()));
                }
            }
            None => {
                if s.final_action != s.baseline_action || s.final_utility != s.baseline_utility {
                    return Err(fail(i, "rejected intervention altered the output".into()));
                }
            }
        }

        // routing, budget, cooldown
        let expected_route = match arm {
            Arm::Baseline => false,
            Arm::Retry | Arm::Gated => {
                cooldown_left == 0
                    && policy.budget_b.is_none_or(|b| routed_so_far < b)
                    && route_decision(s.baseline_confidence, policy.tau)
            }
            Arm::AlwaysRetrieve => true,
            Arm::FixedBudget(k) => routed_so_far < k,
        };
        if s.routed != expected_route {
            return Err(fail(i, format!("routed={} but the gate says {expected_route}", s.routed)));
        }
        if s.routed {
            routed_so_far += 1;
            cooldown_left = if arm.uses_gate() { policy.cooldown } else { 0 };
        } else {
            cooldown_left = cooldown_left.saturating_sub(1);
        }
    }

    let cap = match arm {
        Arm::Retry | Arm::Gated => policy.budget_b,
        Arm::FixedBudget(k) => Some(k),
        Arm::Baseline => Some(0),
        Arm::AlwaysRetrieve => None,
    };
    if let Some(b) = cap {
        if trace.routed_count > b {
            return Err(fail(trace.steps.len(), format!("routed {} over budget {b}", trace.routed_count)));
        }
    }
    let recomputed = EpisodeTrace::from_steps(trace.episode_id, trace.steps.clone());
    if recomputed != *trace {
        return Err(fail(trace.steps.len(), "episode counters differ from recomputation".into()));
    }
    if single_attempt && trace.total_calls != trace.steps.len() as u32 + trace.routed_count {
        return Err(fail(trace.steps.len(), "total_calls != steps + routed".into()));
    }
    Ok(())
}
