//! Confidence conditioned on correctness, tuned to a target AUC.
//!
//! Correct outcomes draw from `Beta(a, 1)` and incorrect ones from
//! `Beta(1, a)`, so that
//!
//! ```text
//! AUC(a) = P(X > Y) = 1 - Gamma(a + 1)^2 / Gamma(2a + 1)
//! ```
//!
//! which rises from 1/2 at `a = 1` towards 1. Targets below 1/2 swap the two
//! distributions. Both inverse CDFs are closed-form, so a shared uniform
//! gives common random numbers across correct and incorrect outcomes.

use statrs::function::gamma::ln_gamma;

const SHAPE_MAX: f64 = 500.0;

/// AUC of `Beta(a, 1)` against `Beta(1, a)`.
pub fn auc_for_shape(a: f64) -> f64 {
    1.0 - (2.0 * ln_gamma(a + 1.0) - ln_gamma(2.0 * a + 1.0)).exp()
}

/// Invert [`auc_for_shape`] by bisection on `[1, SHAPE_MAX]`.
pub fn shape_for_auc(target: f64) -> f64 {
    let target = target.clamp(0.5, auc_for_shape(SHAPE_MAX));
    let (mut lo, mut hi) = (1.0, SHAPE_MAX);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if auc_for_shape(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceModel {
    pub shape: f64,
    /// Correct outcomes sit low instead of high.
    pub inverted: bool,
}

impl ConfidenceModel {
    pub fn for_auc(auc: f64) -> Self {
        if auc >= 0.5 {
            Self {
                shape: shape_for_auc(auc),
                inverted: false,
            }
        } else {
            Self {
                shape: shape_for_auc(1.0 - auc),
                inverted: true,
            }
        }
    }

    pub fn auc(&self) -> f64 {
        let a = auc_for_shape(self.shape);
        if self.inverted {
            1.0 - a
        } else {
            a
        }
    }

    /// Map a uniform draw to a confidence given the outcome.
    pub fn sample(&self, correct: bool, u: f64) -> f64 {
        let high = u.powf(1.0 / self.shape);
        if correct != self.inverted {
            high
        } else {
            1.0 - high
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::roc_auc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// P(X > Y) by midpoint quadrature of f_X(x) F_Y(x).
    fn quadrature_auc(a: f64) -> f64 {
        let n = 200_000;
        (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                let fx = a * x.powf(a - 1.0);
                let fy_cdf = 1.0 - (1.0 - x).powf(a);
                fx * fy_cdf / n as f64
            })
            .sum()
    }

    #[test]
    fn closed_form_matches_quadrature() {
        assert!((auc_for_shape(1.0) - 0.5).abs() < 1e-12);
        assert!((auc_for_shape(2.0) - 5.0 / 6.0).abs() < 1e-12);
        for a in [1.3, 2.0, 3.7, 8.0] {
            assert!((auc_for_shape(a) - quadrature_auc(a)).abs() < 1e-6, "a={a}");
        }
    }

    #[test]
    fn solver_inverts_and_samples_hit_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for target in [0.35, 0.5, 0.65, 0.8, 0.9] {
            let m = ConfidenceModel::for_auc(target);
            assert!((m.auc() - target).abs() < 1e-9);
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for i in 0..20_000 {
                let correct = i % 2 == 0;
                scores.push(m.sample(correct, rng.random()));
                labels.push(correct);
            }
            let realized = roc_auc(&scores, &labels).unwrap();
            assert!((realized - target).abs() < 0.01, "{target}: {realized}");
        }
    }
}
