use super::StatsError;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[NLL_CLAMP, 1 - NLL_CLAMP]` inside the log.
pub const NLL_CLAMP: f64 = 1e-12;

const PLATT_TOL: f64 = 1e-8;
const PLATT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub confidences: Vec<f64>,
    pub correct: Vec<bool>,
}

impl CalibrationSet {
    pub fn new(confidences: Vec<f64>, correct: Vec<bool>) -> Result<Self, StatsError> {
        if confidences.len() != correct.len() {
            return Err(StatsError::LengthMismatch(confidences.len(), correct.len()));
        }
        if let Some(&bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(StatsError::OutOfRange(bad));
        }
        Ok(Self {
            confidences,
            correct,
        })
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn bin_index(c: f64, n_bins: usize) -> usize {
    ((c * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Equal-width bins on [0, 1]; the last bin is closed on the right.
pub fn reliability_bins(set: &CalibrationSet, n_bins: usize) -> Result<Vec<ReliabilityBin>, StatsError> {
    if n_bins == 0 {
        return Err(StatsError::ZeroBins);
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &y) in set.confidences.iter().zip(&set.correct) {
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += y as usize;
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            ReliabilityBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence: conf_sum[b] / n,
                accuracy: hits[b] as f64 / n,
            }
        })
        .collect())
}

pub fn calibration_metrics(set: &CalibrationSet, n_bins: usize) -> Result<CalibrationMetrics, StatsError> {
    if set.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = set.len() as f64;
    let ece = reliability_bins(set, n_bins)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
        .sum();
    let mut brier = 0.0;
    let mut nll = 0.0;
    for (&c, &y) in set.confidences.iter().zip(&set.correct) {
        let t = if y { 1.0 } else { 0.0 };
        brier += (c - t) * (c - t);
        let p = c.clamp(NLL_CLAMP, 1.0 - NLL_CLAMP);
        nll -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(CalibrationMetrics {
        ece,
        brier: brier / n,
        nll: nll / n,
    })
}

/// `P(correct | c) = sigmoid(slope * c + intercept)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattModel {
    pub slope: f64,
    pub intercept: f64,
}

impl PlattModel {
    pub fn predict(&self, c: f64) -> f64 {
        sigmoid(self.slope * c + self.intercept)
    }

    pub fn apply(&self, set: &CalibrationSet) -> CalibrationSet {
        CalibrationSet {
            confidences: set.confidences.iter().map(|&c| self.predict(c)).collect(),
            correct: set.correct.clone(),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logistic_nll(set: &CalibrationSet, a: f64, b: f64) -> f64 {
    set.confidences
        .iter()
        .zip(&set.correct)
        .map(|(&c, &y)| {
            let z = a * c + b;
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum::<f64>()
        / set.len() as f64
}

/// Maximum-likelihood logistic fit by damped Newton with backtracking.
pub fn platt_fit(set: &CalibrationSet) -> Result<PlattModel, StatsError> {
    let n_pos = set.correct.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == set.len() {
        return Err(StatsError::SingleClass);
    }
    let n = set.len() as f64;
    let (mut a, mut b) = (0.0, 0.0);
    let mut loss = logistic_nll(set, a, b);
    for _ in 0..PLATT_MAX_ITER {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&c, &y) in set.confidences.iter().zip(&set.correct) {
            let p = sigmoid(a * c + b);
            let r = p - if y { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            ga += r * c;
            gb += r;
            haa += w * c * c;
            hab += w * c;
            hbb += w;
        }
        let (ga, gb, haa, hab, hbb) = (ga / n, gb / n, haa / n, hab / n, hbb / n);
        if ga.hypot(gb) < PLATT_TOL {
            return Ok(PlattModel {
                slope: a,
                intercept: b,
            });
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 1e-300 {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            (-ga, -gb)
        };
        let mut step = 1.0;
        loop {
            let (na, nb) = (a + step * da, b + step * db);
            let new_loss = logistic_nll(set, na, nb);
            if new_loss <= loss {
                a = na;
                b = nb;
                loss = new_loss;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(StatsError::NonConvergence(PLATT_MAX_ITER));
            }
        }
    }
    Err(StatsError::NonConvergence(PLATT_MAX_ITER))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize) -> CalibrationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let confidences: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let correct = confidences.iter().map(|&c| rng.random::<f64>() < c).collect();
        CalibrationSet::new(confidences, correct).unwrap()
    }

    #[test]
    fn perfectly_calibrated_bins_have_zero_ece() {
        // four at 0.25 with one correct, two at 0.5 with one correct
        let set = CalibrationSet::new(
            vec![0.25, 0.25, 0.25, 0.25, 0.5, 0.5],
            vec![true, false, false, false, true, false],
        )
        .unwrap();
        assert!(calibration_metrics(&set, 10).unwrap().ece.abs() < 1e-15);
        let sure = CalibrationSet::new(vec![1.0], vec![true]).unwrap();
        let m = calibration_metrics(&sure, 10).unwrap();
        assert_eq!(m.brier, 0.0);
        assert!(m.nll < 1e-11);
        assert!(calibration_metrics(&CalibrationSet::new(vec![], vec![]).unwrap(), 10).is_err());
        assert!(CalibrationSet::new(vec![1.5], vec![true]).is_err());
    }

    #[test]
    fn matches_direct_summation() {
        for seed in 0..20 {
            let set = random_set(seed, 200);
            let m = calibration_metrics(&set, 10).unwrap();
            // ECE as a sum over bins of |sum(y - c)| / n
            let mut ece = 0.0;
            for b in 0..10 {
                let members: Vec<usize> = (0..200)
                    .filter(|&i| {
                        let c = set.confidences[i];
                        let lo = b as f64 / 10.0;
                        let hi = (b + 1) as f64 / 10.0;
                        (c >= lo && c < hi) || (b == 9 && c == 1.0)
                    })
                    .collect();
                let s: f64 = members
                    .iter()
                    .map(|&i| set.correct[i] as u8 as f64 - set.confidences[i])
                    .sum();
                ece += s.abs() / 200.0;
            }
            let brier: f64 = (0..200)
                .map(|i| (set.confidences[i] - set.correct[i] as u8 as f64).powi(2))
                .sum::<f64>()
                / 200.0;
            let nll: f64 = (0..200)
                .map(|i| {
                    let p = set.confidences[i].clamp(1e-12, 1.0 - 1e-12);
                    if set.correct[i] { -p.ln() } else { -(1.0 - p).ln() }
                })
                .sum::<f64>()
                / 200.0;
            assert!((m.ece - ece).abs() < 1e-12);
            assert!((m.brier - brier).abs() < 1e-12);
            assert!((m.nll - nll).abs() < 1e-12);
        }
    }

    #[test]
    fn platt_slope_and_base_rate() {
        let sep = CalibrationSet::new(
            vec![0.1, 0.2, 0.3, 0.45, 0.55, 0.7, 0.8, 0.9],
            vec![false, false, false, false, true, true, true, true],
        )
        .unwrap();
        assert!(platt_fit(&sep).unwrap().slope > 0.0);

        // labels independent of confidence: every confidence value carries
        // the same 3:1 label mix, so the MLE is slope 0, intercept logit(3/4)
        let mut c = Vec::new();
        let mut y = Vec::new();
        for k in 0..10 {
            for l in [true, true, true, false] {
                c.push(k as f64 / 9.0);
                y.push(l);
            }
        }
        let set = CalibrationSet::new(c, y).unwrap();
        let m = platt_fit(&set).unwrap();
        assert!(m.slope.abs() < 1e-7);
        assert!((m.intercept - (3.0f64).ln()).abs() < 1e-7);
        assert!((m.predict(0.3) - 0.75).abs() < 1e-7);
    }

    #[test]
    fn platt_beats_best_constant_on_fit_data() {
        for seed in 0..10 {
            let set = random_set(100 + seed, 300);
            let m = platt_fit(&set).unwrap();
            let rate = set.correct.iter().filter(|&&y| y).count() as f64 / 300.0;
            let constant = CalibrationSet::new(vec![rate; 300], set.correct.clone()).unwrap();
            let nll_platt = calibration_metrics(&m.apply(&set), 10).unwrap().nll;
            let nll_const = calibration_metrics(&constant, 10).unwrap().nll;
            assert!(nll_platt <= nll_const + 1e-12);
        }
        let one = CalibrationSet::new(vec![0.2, 0.4], vec![true, true]).unwrap();
        assert_eq!(platt_fit(&one), Err(StatsError::SingleClass));
    }
}
