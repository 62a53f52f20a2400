use super::StatsError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Index-aligned correctness of two policies on the same examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub outcomes_a: Vec<bool>,
    pub outcomes_b: Vec<bool>,
}

impl PairedComparison {
    pub fn new(outcomes_a: Vec<bool>, outcomes_b: Vec<bool>) -> Result<Self, StatsError> {
        if outcomes_a.len() != outcomes_b.len() {
            return Err(StatsError::LengthMismatch(outcomes_a.len(), outcomes_b.len()));
        }
        Ok(Self {
            outcomes_a,
            outcomes_b,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes_a.len()
    }

    fn pairs(&self) -> impl Iterator<Item = (bool, bool)> + '_ {
        self.outcomes_a.iter().copied().zip(self.outcomes_b.iter().copied())
    }

    /// `a` wrong, `b` right.
    pub fn helps(&self) -> u64 {
        self.pairs().filter(|&(a, b)| !a && b).count() as u64
    }

    /// `a` right, `b` wrong.
    pub fn hurts(&self) -> u64 {
        self.pairs().filter(|&(a, b)| a && !b).count() as u64
    }

    pub fn help_hurt(&self) -> i64 {
        self.helps() as i64 - self.hurts() as i64
    }

    pub fn accuracy_a(&self) -> f64 {
        mean_bool(&self.outcomes_a)
    }

    pub fn accuracy_b(&self) -> f64 {
        mean_bool(&self.outcomes_b)
    }

    /// `(helps - hurts) / n`; zero when empty.
    pub fn delta_acc(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.help_hurt() as f64 / self.n() as f64
    }

    /// Per-example `b - a` in {-1, 0, +1}.
    pub fn diffs(&self) -> Vec<f64> {
        self.pairs().map(|(a, b)| b as i8 as f64 - a as i8 as f64).collect()
    }

    pub fn mcnemar_p(&self) -> f64 {
        mcnemar_exact(self.helps(), self.hurts())
    }
}

fn mean_bool(v: &[bool]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|&&x| x).count() as f64 / v.len() as f64
}

/// `P(X <= k)` for `X ~ Binomial(n, 1/2)`, summed in log space.
pub fn binomial_cdf_half(k: u64, n: u64) -> f64 {
    if k >= n {
        return 1.0;
    }
    let ln_half_n = n as f64 * std::f64::consts::LN_2;
    let logs: Vec<f64> = (0..=k).map(|i| ln_binomial(n, i) - ln_half_n).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

/// Exact two-sided McNemar test on the discordant counts.
pub fn mcnemar_exact(helps: u64, hurts: u64) -> f64 {
    let n = helps + hurts;
    if n == 0 {
        return 1.0;
    }
    (2.0 * binomial_cdf_half(helps.min(hurts), n)).min(1.0)
}

/// Percentile bootstrap interval for the mean of `diffs`.
///
/// Quantiles use linear interpolation between order statistics.
pub fn bootstrap_ci(
    diffs: &[f64],
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64), StatsError> {
    if diffs.is_empty() {
        return Err(StatsError::Empty);
    }
    if resamples < 1000 {
        return Err(StatsError::TooFewResamples {
            min: 1000,
            got: resamples,
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok((quantile(&means, alpha / 2.0), quantile(&means, 1.0 - alpha / 2.0)))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * w
}
