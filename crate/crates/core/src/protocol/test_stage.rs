use super::evaluate::{evaluate, evaluate_oracle};
use super::experiment::ProtocolSettings;
use super::ledger::{check_row, LedgerRow};
use super::manifest::FreezeManifest;
use super::ProtocolError;
use crate::bank::MemoryBank;
use crate::controller::{verify_trace, Arm, BankSet, DecisionEnv, EpisodeTrace, PolicyConfig, RetrievalSource};
use crate::keyed::derive_key;
use crate::stage::Stage;
use crate::stats::{
    calibration_metrics, platt_fit, reliability_bins, CalibrationMetrics, CalibrationSet, PlattModel,
};
use crate::worldsim::{EpisodeRef, World};
use serde::{Deserialize, Serialize};

/// Binned baseline accuracy against baseline confidence on test steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfBinRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub raw: CalibrationMetrics,
    /// Fitted on fit-split steps, applied to test steps.
    pub platt: Option<(PlattModel, CalibrationMetrics)>,
}

#[derive(Debug, Clone)]
pub struct TestReport {
    pub rows: Vec<LedgerRow>,
    /// Per-arm traces in ledger order, baseline first.
    pub traces: Vec<(String, Vec<EpisodeTrace>)>,
    pub conf_bins: Vec<ConfBinRow>,
    pub calibration: CalibrationReport,
}

fn step_calibration(world: &World, episodes: &[EpisodeRef], policy: &PolicyConfig) -> Result<CalibrationSet, ProtocolError> {
    let (conf, correct): (Vec<f64>, Vec<bool>) = episodes
        .iter()
        .flat_map(|e| e.query_ids.iter())
        .map(|&q| {
            let d = world.baseline(q, policy.confidence_signal);
            (d.confidence, world.utility(q, d.action) >= 1.0)
        })
        .unzip();
    Ok(CalibrationSet::new(conf, correct)?)
}

/// Evaluate the frozen policy and the comparison arms on test episodes.
/// Banks are sealed first, and every input must match the manifest.
pub fn run_test_stage(
    world: &World,
    manifest: &FreezeManifest,
    policy: &PolicyConfig,
    mut rule: MemoryBank,
    mut exemplar: MemoryBank,
    settings: &ProtocolSettings,
) -> Result<TestReport, ProtocolError> {
    rule.seal();
    exemplar.seal();
    let banks = BankSet::new(Some(rule.freeze()), Some(exemplar.freeze()));
    manifest.validate(policy, &banks, &world.hash())?;

    let episodes = world.episodes(Stage::Test);
    let live = RetrievalSource::Live;
    let arms = [
        Arm::Baseline,
        Arm::Retry,
        Arm::Gated,
        Arm::AlwaysRetrieve,
        Arm::FixedBudget(settings.fixed_budget_k),
    ];
    let mut traces = Vec::new();
    for arm in arms {
        let t = evaluate(world, &episodes, policy, arm, &banks, live)?;
        for tr in &t {
            verify_trace(tr, policy, arm)?;
        }
        traces.push((arm.name(), t));
    }
    traces.push(("oracle".to_string(), evaluate_oracle(world, &episodes, policy, &banks, live)?));

    let baseline = &traces[0].1;
    let mut rows = Vec::new();
    for (name, t) in &traces[1..] {
        let comparison = format!("{name}_vs_baseline");
        let seed = derive_key("bootstrap", &[settings.stats_seed, crate::keyed::text_key(&comparison)]);
        let row = LedgerRow::from_traces(&comparison, baseline, t, settings.bootstrap_resamples, settings.alpha, seed)?;
        check_row(&row, baseline, t)?;
        rows.push(row);
    }

    let test_set = step_calibration(world, &episodes, policy)?;
    let conf_bins = reliability_bins(&test_set, settings.calibration_bins)?
        .into_iter()
        .map(|b| ConfBinRow {
            lo: b.lo,
            hi: b.hi,
            count: b.count,
            mean_confidence: b.mean_confidence,
            accuracy: b.accuracy,
        })
        .collect();
    let fit_set = step_calibration(world, &world.episodes(Stage::Fit), policy)?;
    let platt = match platt_fit(&fit_set) {
        Ok(m) => Some((m, calibration_metrics(&m.apply(&test_set), settings.calibration_bins)?)),
        Err(_) => None,
    };
    Ok(TestReport {
        rows,
        traces,
        conf_bins,
        calibration: CalibrationReport {
            raw: calibration_metrics(&test_set, settings.calibration_bins)?,
            platt,
        },
    })
}

impl TestReport {
    pub fn row(&self, comparison: &str) -> Option<&LedgerRow> {
        self.rows.iter().find(|r| r.comparison == comparison)
    }

    pub fn traces_jsonl(&self) -> String {
        let mut out = String::new();
        for (arm, traces) in &self.traces {
            for t in traces {
                let line = serde_json::json!({ "arm": arm, "trace": t });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn conf_bins_csv(&self) -> String {
        let mut out = String::from("lo,hi,count,mean_confidence,accuracy\n");
        for b in &self.conf_bins {
            out.push_str(&format!(
                "{:.2},{:.2},{},{:.6},{:.6}\n",
                b.lo, b.hi, b.count, b.mean_confidence, b.accuracy
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::EvidenceRecord;
    use crate::protocol::{run_fit_stage, write_ledger_csv, ExperimentConfig};
    use crate::worldsim::WorldSpec;

    fn setup() -> (World, ExperimentConfig) {
        let cfg = ExperimentConfig {
            world: WorldSpec {
                seed: 21,
                n_examples: 300,
                decode_seeds: 2,
                ..WorldSpec::default()
            },
            settings: ProtocolSettings {
                governance_rounds: 1,
                bootstrap_resamples: 2000,
                ..ProtocolSettings::default()
            },
            ..ExperimentConfig::default()
        };
        (World::generate(&cfg.world).unwrap(), cfg)
    }

    #[test]
    fn ledger_rows_are_consistent_and_retry_is_flat() {
        let (w, cfg) = setup();
        let fit = run_fit_stage(&w, &cfg).unwrap();
        let report = run_test_stage(&w, &fit.manifest, &fit.policy, fit.rule, fit.exemplar, &cfg.settings).unwrap();
        assert_eq!(report.rows.len(), 5);
        let retry = report.row("retry_vs_baseline").unwrap();
        assert_eq!((retry.delta_acc, retry.ci_lo, retry.ci_hi, retry.mcnemar_p), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(retry.n, 300);
        let oracle = report.row("oracle_vs_baseline").unwrap();
        for r in &report.rows {
            assert!(oracle.delta_acc >= r.delta_acc);
        }
        assert_eq!(report.conf_bins.iter().map(|b| b.count).sum::<usize>(), 300);
        assert!(report.traces_jsonl().lines().count() == 6 * 300);
    }

    #[test]
    fn tampered_inputs_are_rejected() {
        let (w, cfg) = setup();
        let fit = run_fit_stage(&w, &cfg).unwrap();
        let tampered = PolicyConfig {
            tau: fit.policy.tau + 0.01,
            ..fit.policy.clone()
        };
        let r = run_test_stage(&w, &fit.manifest, &tampered, fit.rule.clone(), fit.exemplar.clone(), &cfg.settings);
        assert!(matches!(r, Err(ProtocolError::ManifestMismatch { .. })));

        let other = World::generate(&WorldSpec { seed: 22, ..cfg.world.clone() }).unwrap();
        let r = run_test_stage(&other, &fit.manifest, &fit.policy, fit.rule.clone(), fit.exemplar.clone(), &cfg.settings);
        assert!(matches!(r, Err(ProtocolError::ManifestMismatch { .. })));

        // a bank with one more retirement than the frozen one
        let (mut shrunk, _) = w.initial_banks().unwrap();
        for episode_id in w.fit_episode_ids().into_iter().take(8) {
            let rec = EvidenceRecord { episode_id, utility: -1.0, iteration: 0 };
            shrunk.append_evidence("R0", rec).unwrap();
        }
        assert_eq!(shrunk.retirement_sweep(0.05).unwrap(), vec!["R0".to_string()]);
        assert!(fit.rule.freeze().contains("R0"));
        let r = run_test_stage(&w, &fit.manifest, &fit.policy, shrunk, fit.exemplar.clone(), &cfg.settings);
        assert!(matches!(r, Err(ProtocolError::ManifestMismatch { .. })));
    }

    #[test]
    fn identical_inputs_give_identical_ledgers() {
        let (w, cfg) = setup();
        let a = run_fit_stage(&w, &cfg).unwrap();
        let b = run_fit_stage(&w, &cfg).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let ra = run_test_stage(&w, &a.manifest, &a.policy, a.rule, a.exemplar, &cfg.settings).unwrap();
        let rb = run_test_stage(&w, &b.manifest, &b.policy, b.rule, b.exemplar, &cfg.settings).unwrap();
        assert_eq!(write_ledger_csv(&ra.rows), write_ledger_csv(&rb.rows));
        assert_eq!(ra.traces_jsonl(), rb.traces_jsonl());
    }
}
