use super::StatsError;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// `mean(hit) - mean(non_hit)`.
    pub observed: f64,
    pub p_value: f64,
    /// Whether every relabelling was enumerated.
    pub exact: bool,
    pub permutations: u64,
}

fn at_least(x: f64, observed: f64) -> bool {
    x >= observed - 1e-12 * (1.0 + observed.abs())
}

/// One-sided test of whether the hit group's mean exceeds the non-hit
/// group's. Enumerates all relabellings when there are at most
/// `n_permutations` of them; otherwise draws `n_permutations` random ones and
/// reports `(1 + #{stat >= observed}) / (1 + n_permutations)`.
pub fn randomization_interaction_test(
    hit_diffs: &[f64],
    non_hit_diffs: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<PermutationResult, StatsError> {
    if hit_diffs.is_empty() || non_hit_diffs.is_empty() {
        return Err(StatsError::Empty);
    }
    let k = hit_diffs.len();
    let pooled: Vec<f64> = hit_diffs.iter().chain(non_hit_diffs).copied().collect();
    let n = pooled.len();
    let total: f64 = pooled.iter().sum();
    // the statistic is increasing in the hit-group sum, so compare sums
    let stat = |hit_sum: f64| hit_sum / k as f64 - (total - hit_sum) / (n - k) as f64;
    let observed_sum: f64 = hit_diffs.iter().sum();
    let observed = stat(observed_sum);

    let n_splits = ln_binomial(n as u64, k as u64).exp();
    if n_splits <= n_permutations as f64 + 0.5 {
        let mut idx: Vec<usize> = (0..k).collect();
        let (mut count, mut seen) = (0u64, 0u64);
        loop {
            let s: f64 = idx.iter().map(|&i| pooled[i]).sum();
            seen += 1;
            count += at_least(s, observed_sum) as u64;
            // next k-combination in lexicographic order
            let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
        return Ok(PermutationResult {
            observed,
            p_value: count as f64 / seen as f64,
            exact: true,
            permutations: seen,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0u64;
    for _ in 0..n_permutations {
        let s: f64 = sample(&mut rng, n, k).iter().map(|i| pooled[i]).sum();
        count += at_least(s, observed_sum) as u64;
    }
    Ok(PermutationResult {
        observed,
        p_value: (1 + count) as f64 / (1 + n_permutations) as f64,
        exact: false,
        permutations: n_permutations as u64,
    })
}
