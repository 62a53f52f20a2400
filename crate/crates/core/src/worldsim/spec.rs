use super::WorldError;
use crate::bank::BankKind;
use crate::config::{range_check, render, ConfigError, FlatConfig};
use crate::controller::Context;
use crate::keyed::sha256_hex;
use serde::{Deserialize, Serialize};

/// Every knob of a synthetic world. `seed` determines all randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub fit_fraction: f64,
    pub steps_per_episode: usize,
    /// Independent decode replicas pooled into one evaluation.
    pub decode_seeds: usize,
    pub base_accuracy: f64,
    pub applicability_rule: f64,
    pub applicability_exemplar: f64,
    /// Per-entry applicability is spread uniformly over `rate +- spread`.
    pub applicability_spread: f64,
    pub help_prob_given_applicable: f64,
    pub hurt_prob_given_inapplicable: f64,
    /// Correct-vs-incorrect separability of baseline confidence.
    pub baseline_auc: f64,
    pub second_auc_rule: f64,
    pub second_auc_exemplar: f64,
    pub second_auc_dual: f64,
    pub guard_fail_prob: f64,
    pub topic_count: usize,
    pub rule_bank_size: usize,
    pub exemplar_bank_size: usize,
    pub noise_dim: usize,
    pub topic_weight: f64,
    /// Fraction of entries that spoil any second pass they are injected into.
    pub toxic_fraction: f64,
    pub edited_bank: BankKind,
    pub edited_count: usize,
    /// Exact number of topic-0 queries in the test split, if set.
    pub edit_topic_queries: Option<usize>,
    pub repair_applicability: f64,
    pub corrupt_applicability: f64,
    /// Chance that re-embedding an edited entry moves it to another topic.
    pub drift_prob: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_examples: 600,
            fit_fraction: 0.5,
            steps_per_episode: 1,
            decode_seeds: 3,
            base_accuracy: 0.74,
            applicability_rule: 0.5,
            applicability_exemplar: 0.5,
            applicability_spread: 0.0,
            help_prob_given_applicable: 0.6,
            hurt_prob_given_inapplicable: 0.3,
            baseline_auc: 0.75,
            second_auc_rule: 0.8,
            second_auc_exemplar: 0.8,
            second_auc_dual: 0.8,
            guard_fail_prob: 0.05,
            topic_count: 10,
            rule_bank_size: 50,
            exemplar_bank_size: 100,
            noise_dim: 16,
            topic_weight: 0.9,
            toxic_fraction: 0.0,
            edited_bank: BankKind::Rule,
            edited_count: 0,
            edit_topic_queries: None,
            repair_applicability: 0.9,
            corrupt_applicability: 0.1,
            drift_prob: 0.5,
        }
    }
}

struct OptCount(Option<usize>);

impl std::fmt::Display for OptCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            None => f.write_str("none"),
            Some(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for OptCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            return Ok(OptCount(None));
        }
        s.parse().map(|n| OptCount(Some(n))).map_err(|e| format!("{e}"))
    }
}

impl WorldSpec {
    pub fn second_auc(&self, ctx: Context) -> f64 {
        match ctx {
            Context::Rule => self.second_auc_rule,
            Context::Exemplar => self.second_auc_exemplar,
            Context::Dual => self.second_auc_dual,
        }
    }

    pub fn applicability(&self, kind: BankKind) -> f64 {
        match kind {
            BankKind::Rule => self.applicability_rule,
            BankKind::Exemplar => self.applicability_exemplar,
        }
    }

    pub fn bank_size(&self, kind: BankKind) -> usize {
        match kind {
            BankKind::Rule => self.rule_bank_size,
            BankKind::Exemplar => self.exemplar_bank_size,
        }
    }

    pub fn n_fit_examples(&self) -> usize {
        (self.fit_fraction * self.n_examples as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let probs = [
            ("fit_fraction", self.fit_fraction),
            ("base_accuracy", self.base_accuracy),
            ("applicability_rate.rule", self.applicability_rule),
            ("applicability_rate.exemplar", self.applicability_exemplar),
            ("applicability_spread", self.applicability_spread),
            ("help_prob_given_applicable", self.help_prob_given_applicable),
            ("hurt_prob_given_inapplicable", self.hurt_prob_given_inapplicable),
            ("baseline_auc", self.baseline_auc),
            ("second_auc.rule", self.second_auc_rule),
            ("second_auc.exemplar", self.second_auc_exemplar),
            ("second_auc.dual", self.second_auc_dual),
            ("guard_fail_prob", self.guard_fail_prob),
            ("topic_weight", self.topic_weight),
            ("toxic_fraction", self.toxic_fraction),
            ("repair_applicability", self.repair_applicability),
            ("corrupt_applicability", self.corrupt_applicability),
            ("drift_prob", self.drift_prob),
        ];
        for (key, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(WorldError::InvalidProbability { key, value: v });
            }
        }
        let bad = |msg: &str| Err(WorldError::InvalidSpec(msg.to_string()));
        if self.n_examples == 0 || self.steps_per_episode == 0 || self.decode_seeds == 0 {
            return bad("n_examples, steps_per_episode and decode_seeds must be positive");
        }
        let n_fit = self.n_fit_examples();
        if n_fit == 0 || n_fit >= self.n_examples {
            return bad("fit_fraction must leave both splits nonempty");
        }
        if self.topic_count < 2 {
            return bad("topic_count must be at least 2");
        }
        if self.rule_bank_size == 0 && self.exemplar_bank_size == 0 {
            return bad("at least one bank must be nonempty");
        }
        if self.edited_count > 0 {
            let on_topic0 = self.bank_size(self.edited_bank).div_ceil(self.topic_count);
            if self.edited_count > on_topic0 {
                return bad("edited_count exceeds the edited bank's topic-0 entries");
            }
        }
        if let Some(k) = self.edit_topic_queries {
            let test_items = (self.n_examples - n_fit) * self.steps_per_episode;
            if k > test_items {
                return bad("edit_topic_queries exceeds the number of test queries");
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> String {
        render(&[
            ("seed", self.seed.to_string()),
            ("n_examples", self.n_examples.to_string()),
            ("fit_fraction", self.fit_fraction.to_string()),
            ("steps_per_episode", self.steps_per_episode.to_string()),
            ("decode_seeds", self.decode_seeds.to_string()),
            ("base_accuracy", self.base_accuracy.to_string()),
            ("applicability_rate.rule", self.applicability_rule.to_string()),
            ("applicability_rate.exemplar", self.applicability_exemplar.to_string()),
            ("applicability_spread", self.applicability_spread.to_string()),
            ("help_prob_given_applicable", self.help_prob_given_applicable.to_string()),
            ("hurt_prob_given_inapplicable", self.hurt_prob_given_inapplicable.to_string()),
            ("baseline_auc", self.baseline_auc.to_string()),
            ("second_auc.rule", self.second_auc_rule.to_string()),
            ("second_auc.exemplar", self.second_auc_exemplar.to_string()),
            ("second_auc.dual", self.second_auc_dual.to_string()),
            ("guard_fail_prob", self.guard_fail_prob.to_string()),
            ("topic_count", self.topic_count.to_string()),
            ("rule_bank_size", self.rule_bank_size.to_string()),
            ("exemplar_bank_size", self.exemplar_bank_size.to_string()),
            ("noise_dim", self.noise_dim.to_string()),
            ("topic_weight", self.topic_weight.to_string()),
            ("toxic_fraction", self.toxic_fraction.to_string()),
            ("edited_bank", self.edited_bank.to_string()),
            ("edited_count", self.edited_count.to_string()),
            ("edit_topic_queries", OptCount(self.edit_topic_queries).to_string()),
            ("repair_applicability", self.repair_applicability.to_string()),
            ("corrupt_applicability", self.corrupt_applicability.to_string()),
            ("drift_prob", self.drift_prob.to_string()),
        ])
    }

    /// Take world keys from a config; absent keys keep their defaults.
    pub fn take_from(c: &mut FlatConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let spec = Self {
            seed: c.take_or("seed", d.seed)?,
            n_examples: c.take_or("n_examples", d.n_examples)?,
            fit_fraction: c.take_or("fit_fraction", d.fit_fraction)?,
            steps_per_episode: c.take_or("steps_per_episode", d.steps_per_episode)?,
            decode_seeds: c.take_or("decode_seeds", d.decode_seeds)?,
            base_accuracy: c.take_or("base_accuracy", d.base_accuracy)?,
            applicability_rule: c.take_or("applicability_rate.rule", d.applicability_rule)?,
            applicability_exemplar: c
                .take_or("applicability_rate.exemplar", d.applicability_exemplar)?,
            applicability_spread: c.take_or("applicability_spread", d.applicability_spread)?,
            help_prob_given_applicable: c
                .take_or("help_prob_given_applicable", d.help_prob_given_applicable)?,
            hurt_prob_given_inapplicable: c
                .take_or("hurt_prob_given_inapplicable", d.hurt_prob_given_inapplicable)?,
            baseline_auc: c.take_or("baseline_auc", d.baseline_auc)?,
            second_auc_rule: c.take_or("second_auc.rule", d.second_auc_rule)?,
            second_auc_exemplar: c.take_or("second_auc.exemplar", d.second_auc_exemplar)?,
            second_auc_dual: c.take_or("second_auc.dual", d.second_auc_dual)?,
            guard_fail_prob: c.take_or("guard_fail_prob", d.guard_fail_prob)?,
            topic_count: c.take_or("topic_count", d.topic_count)?,
            rule_bank_size: c.take_or("rule_bank_size", d.rule_bank_size)?,
            exemplar_bank_size: c.take_or("exemplar_bank_size", d.exemplar_bank_size)?,
            noise_dim: c.take_or("noise_dim", d.noise_dim)?,
            topic_weight: c.take_or("topic_weight", d.topic_weight)?,
            toxic_fraction: c.take_or("toxic_fraction", d.toxic_fraction)?,
            edited_bank: c.take_or("edited_bank", d.edited_bank)?,
            edited_count: c.take_or("edited_count", d.edited_count)?,
            edit_topic_queries: c.take_or("edit_topic_queries", OptCount(d.edit_topic_queries))?.0,
            repair_applicability: c.take_or("repair_applicability", d.repair_applicability)?,
            corrupt_applicability: c.take_or("corrupt_applicability", d.corrupt_applicability)?,
            drift_prob: c.take_or("drift_prob", d.drift_prob)?,
        };
        range_check("topic_weight", spec.topic_weight, 0.0, 1.0)?;
        Ok(spec)
    }

    pub fn from_flat(text: &str) -> Result<Self, WorldError> {
        let mut c = FlatConfig::parse(text)?;
        let spec = Self::take_from(&mut c)?;
        c.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Digest of the canonical form; identifies the generated world.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_flat().as_bytes())
    }
}
