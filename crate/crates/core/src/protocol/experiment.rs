use super::ProtocolError;
use crate::config::{range_check, render, ConfigError, FlatConfig};
use crate::controller::{BankPolicy, Budget, ConfidenceSignal, PolicyConfig};
use crate::stats::{DEFAULT_ALPHA, DEFAULT_RESAMPLES};
use crate::worldsim::WorldSpec;

/// Candidate values searched in the fit stage. Thresholds come either as
/// explicit taus or as percentiles of the fit baseline confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub percentiles: Option<Vec<f64>>,
    pub taus: Vec<f64>,
    pub margins: Vec<f64>,
    pub bank_policies: Vec<BankPolicy>,
    pub signals: Vec<ConfidenceSignal>,
    pub budgets: Vec<Option<u32>>,
}

impl Grid {
    /// The one-point grid at `policy`.
    pub fn single(policy: &PolicyConfig) -> Self {
        Self {
            percentiles: None,
            taus: vec![policy.tau],
            margins: vec![policy.margin_m],
            bank_policies: vec![policy.bank_policy],
            signals: vec![policy.confidence_signal],
            budgets: vec![policy.budget_b],
        }
    }

    pub fn size(&self) -> usize {
        let thresholds = self.percentiles.as_ref().map_or(self.taus.len(), Vec::len);
        thresholds
            * self.margins.len()
            * self.bank_policies.len()
            * self.signals.len()
            * self.budgets.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSettings {
    pub governance_rounds: usize,
    pub bootstrap_resamples: usize,
    pub alpha: f64,
    pub stats_seed: u64,
    pub n_permutations: usize,
    pub calibration_bins: usize,
    pub fixed_budget_k: u32,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self {
            governance_rounds: 3,
            bootstrap_resamples: DEFAULT_RESAMPLES,
            alpha: DEFAULT_ALPHA,
            stats_seed: 0,
            n_permutations: 10_000,
            calibration_bins: 10,
            fixed_budget_k: 2,
        }
    }
}

/// World, base policy, search grid, and protocol settings in one flat file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub policy: PolicyConfig,
    pub grid: Grid,
    pub settings: ProtocolSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let policy = PolicyConfig::default();
        Self {
            world: WorldSpec::default(),
            grid: Grid::single(&policy),
            policy,
            settings: ProtocolSettings::default(),
        }
    }
}

fn list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut c = FlatConfig::parse(text)?;
        let world = WorldSpec::take_from(&mut c)?;
        let policy = PolicyConfig::take_from(&mut c, false)?;
        let percentiles: Option<Vec<f64>> = c.take_list("grid.percentiles")?;
        let taus: Option<Vec<f64>> = c.take_list("grid.tau")?;
        if percentiles.is_some() && taus.is_some() {
            return Err(ConfigError::Value {
                key: "grid.tau".into(),
                msg: "give either grid.tau or grid.percentiles, not both".into(),
            }
            .into());
        }
        for &p in percentiles.iter().flatten() {
            range_check("grid.percentiles", p, 0.0, 100.0)?;
        }
        let grid = Grid {
            percentiles,
            taus: taus.unwrap_or_else(|| vec![policy.tau]),
            margins: c.take_list("grid.margin_m")?.unwrap_or_else(|| vec![policy.margin_m]),
            bank_policies: c
                .take_list("grid.bank_policy")?
                .unwrap_or_else(|| vec![policy.bank_policy]),
            signals: c
                .take_list("grid.confidence_signal")?
                .unwrap_or_else(|| vec![policy.confidence_signal]),
            budgets: c
                .take_list::<Budget>("grid.budget_B")?
                .map(|b| b.into_iter().map(|b| b.0).collect())
                .unwrap_or_else(|| vec![policy.budget_b]),
        };
        let d = ProtocolSettings::default();
        let settings = ProtocolSettings {
            governance_rounds: c.take_or("governance_rounds", d.governance_rounds)?,
            bootstrap_resamples: c.take_or("bootstrap_resamples", d.bootstrap_resamples)?,
            alpha: c.take_or("alpha", d.alpha)?,
            stats_seed: c.take_or("stats_seed", d.stats_seed)?,
            n_permutations: c.take_or("n_permutations", d.n_permutations)?,
            calibration_bins: c.take_or("calibration_bins", d.calibration_bins)?,
            fixed_budget_k: c.take_or("fixed_budget_k", d.fixed_budget_k)?,
        };
        c.finish()?;
        world.validate()?;
        if grid.size() == 0 {
            return Err(ProtocolError::EmptyGrid);
        }
        Ok(Self {
            world,
            policy,
            grid,
            settings,
        })
    }

    pub fn to_flat(&self) -> String {
        let g = &self.grid;
        let s = &self.settings;
        let mut pairs = vec![
            ("grid.margin_m", list(&g.margins)),
            ("grid.bank_policy", list(&g.bank_policies)),
            ("grid.confidence_signal", list(&g.signals)),
            (
                "grid.budget_B",
                list(&g.budgets.iter().map(|&b| Budget(b)).collect::<Vec<_>>()),
            ),
            ("governance_rounds", s.governance_rounds.to_string()),
            ("bootstrap_resamples", s.bootstrap_resamples.to_string()),
            ("alpha", s.alpha.to_string()),
            ("stats_seed", s.stats_seed.to_string()),
            ("n_permutations", s.n_permutations.to_string()),
            ("calibration_bins", s.calibration_bins.to_string()),
            ("fixed_budget_k", s.fixed_budget_k.to_string()),
        ];
        match &g.percentiles {
            Some(p) => pairs.insert(0, ("grid.percentiles", list(p))),
            None => pairs.insert(0, ("grid.tau", list(&g.taus))),
        }
        format!(
            "{}{}{}",
            self.world.to_flat(),
            self.policy.to_flat(),
            render(&pairs)
        )
    }
}
