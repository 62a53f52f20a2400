//! Frozen control knobs and their flat-file form.

use crate::bank::{BankKind, DEFAULT_DELTA};
use crate::config::{render, ConfigError, FlatConfig};
use crate::keyed::sha256_hex;
use crate::retrieval::{DEFAULT_K_MAX, DEFAULT_THRESHOLD};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// Structural checks on a second-pass proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guard {
    Format,
    Valid,
    Progress,
    Contract,
}

impl Guard {
    pub const ALL: [Guard; 4] = [Guard::Format, Guard::Valid, Guard::Progress, Guard::Contract];

    pub fn as_str(self) -> &'static str {
        match self {
            Guard::Format => "format",
            Guard::Valid => "valid",
            Guard::Progress => "progress",
            Guard::Contract => "contract",
        }
    }
}

impl FromStr for Guard {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Guard::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown guard `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardResults {
    pub format: bool,
    pub valid: bool,
    pub progress: bool,
    pub contract: bool,
}

impl GuardResults {
    pub const PASS: GuardResults = GuardResults {
        format: true,
        valid: true,
        progress: true,
        contract: true,
    };

    pub fn get(&self, guard: Guard) -> bool {
        match guard {
            Guard::Format => self.format,
            Guard::Valid => self.valid,
            Guard::Progress => self.progress,
            Guard::Contract => self.contract,
        }
    }

    /// First enabled guard that failed. Disabled guards count as passing.
    pub fn first_failure(&self, enabled: &BTreeSet<Guard>) -> Option<Guard> {
        enabled.iter().copied().find(|&g| !self.get(g))
    }
}

impl Default for GuardResults {
    fn default() -> Self {
        Self::PASS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSignal {
    MeanLogprob,
    SumLogprob,
    FirstToken,
}

impl ConfidenceSignal {
    pub const ALL: [ConfidenceSignal; 3] = [
        ConfidenceSignal::MeanLogprob,
        ConfidenceSignal::SumLogprob,
        ConfidenceSignal::FirstToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceSignal::MeanLogprob => "mean_logprob",
            ConfidenceSignal::SumLogprob => "sum_logprob",
            ConfidenceSignal::FirstToken => "first_token",
        }
    }
}

impl fmt::Display for ConfidenceSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfidenceSignal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConfidenceSignal::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown confidence signal `{s}`"))
    }
}

/// How the second pass is composed from the available banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankPolicy {
    /// One bank, margin bypassed, guards still enforced.
    GateOnly(BankKind),
    /// One bank with full acceptance.
    Choose(BankKind),
    CascadeRuleThenExemplar,
    CascadeExemplarThenRule,
    /// Both banks injected jointly into a single second pass.
    Dual,
    /// Placeholder resolved at fit time to the best of the cascades and dual.
    MultibankBest,
}

impl BankPolicy {
    /// Every family in enumeration order (used for fit-stage tie-breaks).
    pub const ALL: [BankPolicy; 8] = [
        BankPolicy::GateOnly(BankKind::Rule),
        BankPolicy::GateOnly(BankKind::Exemplar),
        BankPolicy::Choose(BankKind::Rule),
        BankPolicy::Choose(BankKind::Exemplar),
        BankPolicy::CascadeRuleThenExemplar,
        BankPolicy::CascadeExemplarThenRule,
        BankPolicy::Dual,
        BankPolicy::MultibankBest,
    ];

    pub const MULTIBANK_MEMBERS: [BankPolicy; 3] = [
        BankPolicy::CascadeRuleThenExemplar,
        BankPolicy::CascadeExemplarThenRule,
        BankPolicy::Dual,
    ];

    /// Banks exposed by retrieval-only baselines built on this family.
    pub fn exposure_banks(self) -> Vec<BankKind> {
        match self {
            BankPolicy::GateOnly(b) | BankPolicy::Choose(b) => vec![b],
            BankPolicy::CascadeRuleThenExemplar => vec![BankKind::Rule],
            BankPolicy::CascadeExemplarThenRule => vec![BankKind::Exemplar],
            BankPolicy::Dual | BankPolicy::MultibankBest => vec![BankKind::Rule, BankKind::Exemplar],
        }
    }

    pub fn is_cascade(self) -> bool {
        matches!(
            self,
            BankPolicy::CascadeRuleThenExemplar | BankPolicy::CascadeExemplarThenRule
        )
    }
}

impl fmt::Display for BankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BankPolicy::GateOnly(b) => write!(f, "gate_only:{b}"),
            BankPolicy::Choose(b) => write!(f, "choose:{b}"),
            BankPolicy::CascadeRuleThenExemplar => f.write_str("cascade_rule_then_exemplar"),
            BankPolicy::CascadeExemplarThenRule => f.write_str("cascade_exemplar_then_rule"),
            BankPolicy::Dual => f.write_str("dual"),
            BankPolicy::MultibankBest => f.write_str("multibank_best"),
        }
    }
}

impl FromStr for BankPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(bank) = s.strip_prefix("gate_only:") {
            return Ok(BankPolicy::GateOnly(bank.parse()?));
        }
        if let Some(bank) = s.strip_prefix("choose:") {
            return Ok(BankPolicy::Choose(bank.parse()?));
        }
        match s {
            "cascade_rule_then_exemplar" => Ok(BankPolicy::CascadeRuleThenExemplar),
            "cascade_exemplar_then_rule" => Ok(BankPolicy::CascadeExemplarThenRule),
            "dual" => Ok(BankPolicy::Dual),
            "multibank_best" => Ok(BankPolicy::MultibankBest),
            other => Err(format!("unknown bank policy `{other}`")),
        }
    }
}

/// Every control knob of a gated policy. Frozen after the fit stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Route when baseline confidence is strictly below this.
    pub tau: f64,
    pub margin_m: f64,
    pub guards_enabled: BTreeSet<Guard>,
    pub bank_policy: BankPolicy,
    /// Routed steps allowed per episode; `None` is unlimited.
    pub budget_b: Option<u32>,
    /// Steps skipped after each routed step.
    pub cooldown: u32,
    pub lambda: f64,
    pub delta: f64,
    pub confidence_signal: ConfidenceSignal,
    pub retrieval_threshold: f64,
    /// Entries retrieved per bank.
    pub k_max: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            margin_m: 0.05,
            guards_enabled: [Guard::Format, Guard::Valid].into(),
            bank_policy: BankPolicy::Choose(BankKind::Rule),
            budget_b: None,
            cooldown: 0,
            lambda: 0.0,
            delta: DEFAULT_DELTA,
            confidence_signal: ConfidenceSignal::MeanLogprob,
            retrieval_threshold: DEFAULT_THRESHOLD,
            k_max: DEFAULT_K_MAX,
        }
    }
}

/// `unlimited` or a nonnegative integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget(pub Option<u32>);

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("unlimited"),
            Some(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "unlimited" {
            return Ok(Budget(None));
        }
        s.parse::<u32>()
            .map(|b| Budget(Some(b)))
            .map_err(|e| e.to_string())
    }
}

/// Comma-separated guard set, `none` when empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardSet(pub BTreeSet<Guard>);

impl fmt::Display for GuardSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.0.iter().map(|g| g.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for GuardSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "none" {
            return Ok(GuardSet(BTreeSet::new()));
        }
        s.split(',')
            .map(|g| g.trim().parse())
            .collect::<Result<BTreeSet<_>, _>>()
            .map(GuardSet)
    }
}

impl PolicyConfig {
    pub const KEYS: [&'static str; 11] = [
        "tau",
        "margin_m",
        "guards_enabled",
        "bank_policy",
        "budget_B",
        "cooldown",
        "lambda",
        "delta",
        "confidence_signal",
        "retrieval_threshold",
        "k_max",
    ];

    pub fn to_flat(&self) -> String {
        render(&[
            ("tau", self.tau.to_string()),
            ("margin_m", self.margin_m.to_string()),
            ("guards_enabled", GuardSet(self.guards_enabled.clone()).to_string()),
            ("bank_policy", self.bank_policy.to_string()),
            ("budget_B", Budget(self.budget_b).to_string()),
            ("cooldown", self.cooldown.to_string()),
            ("lambda", self.lambda.to_string()),
            ("delta", self.delta.to_string()),
            ("confidence_signal", self.confidence_signal.to_string()),
            ("retrieval_threshold", self.retrieval_threshold.to_string()),
            ("k_max", self.k_max.to_string()),
        ])
    }

    /// Read a policy file; every key is required and no others are allowed.
    pub fn from_flat(text: &str) -> Result<Self, ConfigError> {
        let mut c = FlatConfig::parse(text)?;
        let policy = Self::take_from(&mut c, true)?;
        c.finish()?;
        Ok(policy)
    }

    /// Take policy keys from a larger config; missing keys fall back to
    /// defaults unless `require_all`.
    pub fn take_from(c: &mut FlatConfig, require_all: bool) -> Result<Self, ConfigError> {
        if require_all {
            if let Some(missing) = Self::KEYS.iter().find(|k| !c.contains(k)) {
                return Err(ConfigError::Value {
                    key: missing.to_string(),
                    msg: "missing".into(),
                });
            }
        }
        let d = Self::default();
        let policy = Self {
            tau: c.take_or("tau", d.tau)?,
            margin_m: c.take_or("margin_m", d.margin_m)?,
            guards_enabled: c.take_or("guards_enabled", GuardSet(d.guards_enabled))?.0,
            bank_policy: c.take_or("bank_policy", d.bank_policy)?,
            budget_b: c.take_or("budget_B", Budget(d.budget_b))?.0,
            cooldown: c.take_or("cooldown", d.cooldown)?,
            lambda: c.take_or("lambda", d.lambda)?,
            delta: c.take_or("delta", d.delta)?,
            confidence_signal: c.take_or("confidence_signal", d.confidence_signal)?,
            retrieval_threshold: c.take_or("retrieval_threshold", d.retrieval_threshold)?,
            k_max: c.take_or("k_max", d.k_max)?,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| ConfigError::Value {
            key: key.to_string(),
            msg,
        };
        if !self.tau.is_finite() {
            return Err(bad("tau", "must be finite".into()));
        }
        if !self.margin_m.is_finite() {
            return Err(bad("margin_m", "must be finite".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", "must be >= 0".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(bad("delta", "must lie in (0, 1)".into()));
        }
        if !(-1.0..=1.0).contains(&self.retrieval_threshold) {
            return Err(bad("retrieval_threshold", "must lie in [-1, 1]".into()));
        }
        if self.k_max == 0 {
            return Err(bad("k_max", "must be positive".into()));
        }
        Ok(())
    }

    /// Digest over the canonical flat form; covers every field.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_flat().as_bytes())
    }
}
