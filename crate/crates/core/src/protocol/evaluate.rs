use crate::controller::{
    oracle_episode, run_episode, Arm, BankSet, ControllerError, EpisodeTrace, PolicyConfig,
    RetrievalSource,
};
use crate::worldsim::{EpisodeRef, World};
use rayon::prelude::*;

/// Run one arm over `episodes`. Episodes run in parallel; the result keeps
/// the input order.
pub fn evaluate(
    world: &World,
    episodes: &[EpisodeRef],
    policy: &PolicyConfig,
    arm: Arm,
    banks: &BankSet,
    source: RetrievalSource<'_>,
) -> Result<Vec<EpisodeTrace>, ControllerError> {
    episodes
        .par_iter()
        .map(|e| run_episode(world, e.episode_id, &e.query_ids, policy, arm, banks, source))
        .collect()
}

pub fn evaluate_oracle(
    world: &World,
    episodes: &[EpisodeRef],
    policy: &PolicyConfig,
    banks: &BankSet,
    source: RetrievalSource<'_>,
) -> Result<Vec<EpisodeTrace>, ControllerError> {
    episodes
        .par_iter()
        .map(|e| oracle_episode(world, e.episode_id, &e.query_ids, policy, banks, source))
        .collect()
}

/// Episode success indicators.
pub fn outcomes(traces: &[EpisodeTrace]) -> Vec<bool> {
    traces.iter().map(EpisodeTrace::success).collect()
}

pub fn accuracy(traces: &[EpisodeTrace]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().filter(|t| t.success()).count() as f64 / traces.len() as f64
}

/// Model calls per episode.
pub fn mean_calls(traces: &[EpisodeTrace]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().map(|t| t.total_calls as f64).sum::<f64>() / traces.len() as f64
}

/// Fractions of all steps that were routed and accepted.
pub fn step_fractions(traces: &[EpisodeTrace]) -> (f64, f64) {
    let steps: usize = traces.iter().map(|t| t.steps.len()).sum();
    if steps == 0 {
        return (0.0, 0.0);
    }
    let routed: usize = traces.iter().map(|t| t.routed_count as usize).sum();
    let accepted: usize = traces.iter().map(|t| t.accepted_count as usize).sum();
    (routed as f64 / steps as f64, accepted as f64 / steps as f64)
}
