//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any criterion fails.

use memgate::bank::{BankError, BankKind, EvidenceRecord, MemoryBank, MemoryEntry};
use memgate::controller::{
    verify_trace, Arm, BankPolicy, BankSet, ConfidenceSignal, DecisionEnv, EpisodeTrace, Guard,
    PolicyConfig, RetrievalSource, StepRecord,
};
use memgate::keyed::keyed_rng;
use memgate::protocol::{
    accuracy, evaluate, evaluate_oracle, ledger_check, run_counterfactual, run_fit_stage,
    run_test_stage, ExperimentConfig, LedgerCheck, ProtocolError, ProtocolSettings, ReplayMode,
};
use memgate::retrieval::{apply_edits, freeze_identities, target_hit_partition, ContentEdit, EditKind};
use memgate::stage::Stage;
use memgate::stats::{
    calibration_metrics, mcnemar_exact, randomization_interaction_test, roc_auc, CalibrationSet,
};
use memgate::worldsim::{World, WorldSpec};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn gated(bank_policy: BankPolicy, tau: f64) -> PolicyConfig {
    PolicyConfig {
        tau,
        bank_policy,
        ..PolicyConfig::default()
    }
}

fn edit_world(seed: u64) -> WorldSpec {
    WorldSpec {
        seed,
        n_examples: 300,
        decode_seeds: 2,
        steps_per_episode: 1 + (seed % 2) as usize,
        edited_bank: if seed.is_multiple_of(3) { BankKind::Exemplar } else { BankKind::Rule },
        edited_count: 2 + (seed % 3) as usize,
        drift_prob: 0.6,
        ..WorldSpec::default()
    }
}

fn single_attempt_policy(seed: u64, edited: BankKind) -> PolicyConfig {
    let bp = match seed % 3 {
        0 => BankPolicy::Choose(edited),
        1 => BankPolicy::GateOnly(edited),
        _ => BankPolicy::Dual,
    };
    gated(bp, 0.6 + 0.05 * (seed % 4) as f64)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut rows, mut drifted) = (0usize, 0usize);
    for seed in 0..24 {
        let spec = edit_world(seed);
        let w = World::generate(&spec).map_err(err)?;
        let banks = w.initial_bank_set().map_err(err)?;
        let p = single_attempt_policy(seed, spec.edited_bank);
        let r = run_counterfactual(&w, &p, &banks, &w.edits(EditKind::Repair), &w.edits(EditKind::Corrupt), 1000, seed)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        for row in &r.rows {
            for kind in [EditKind::Repair, EditKind::Corrupt] {
                let (y, fixed) = match kind {
                    EditKind::Repair => (row.outcome_repair_free, row.outcome_repair_fixed),
                    EditKind::Corrupt => (row.outcome_corrupt_free, row.outcome_corrupt_fixed),
                };
                let free = y - row.outcome_original;
                let content = fixed - row.outcome_original;
                let drift = y - fixed;
                ensure(free == content + drift, || format!("seed {seed} query {}: residual", row.query_id))?;
                ensure(row.terms(kind, ReplayMode::Free) == (free, content, drift), || {
                    format!("seed {seed} query {}: reported terms differ", row.query_id)
                })?;
                drifted += (drift != 0.0) as usize;
            }
        }
        ensure(r.audits.iter().all(|a| a.max_residual == 0.0), || format!("seed {seed}: audit residual"))?;
        rows += r.rows.len();
    }
    ensure(drifted > 0, || "no row ever drifted; the suite would be vacuous".into())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "24 worlds, {rows} rows, {drifted} drifting free contrasts, residual 0, {:.1?}",
        start.elapsed()
    ))
}

fn step_index(traces: &[EpisodeTrace]) -> BTreeMap<u64, &StepRecord> {
    traces.iter().flat_map(|t| &t.steps).map(|s| (s.query_id, s)).collect()
}

fn edited(banks: &BankSet, edits: &[ContentEdit]) -> Result<BankSet, String> {
    let mut out = banks.clone();
    for snap in banks.iter() {
        let mine: Vec<ContentEdit> = edits.iter().filter(|e| snap.contains(&e.entry_id)).cloned().collect();
        out.set(apply_edits(snap, &mine).map_err(err)?);
    }
    Ok(out)
}

fn criterion_2() -> Outcome {
    let (mut hits, mut non_hits) = (0usize, 0usize);
    for seed in 100..112 {
        let spec = edit_world(seed);
        let w = World::generate(&spec).map_err(err)?;
        let banks = w.initial_bank_set().map_err(err)?;
        let p = single_attempt_policy(seed, spec.edited_bank);
        let (repair, corrupt) = (w.edits(EditKind::Repair), w.edits(EditKind::Corrupt));

        // independent replay through the public pieces
        let eps = w.episodes(Stage::Test);
        let original = evaluate(&w, &eps, &p, Arm::Gated, &banks, RetrievalSource::Live).map_err(err)?;
        let frozen = freeze_identities(&original).map_err(err)?;
        let ids: BTreeSet<String> = w.edited_ids();
        let (hit, miss) = target_hit_partition(&frozen, &ids);
        let fixed = |edits: &[ContentEdit]| -> Result<Vec<EpisodeTrace>, String> {
            evaluate(&w, &eps, &p, Arm::Gated, &edited(&banks, edits)?, RetrievalSource::Frozen(&frozen)).map_err(err)
        };
        let (rt, ct) = (fixed(&repair)?, fixed(&corrupt)?);
        let (rmap, cmap) = (step_index(&rt), step_index(&ct));
        for &q in &miss {
            let (a, b) = (rmap[&q], cmap[&q]);
            let (ja, jb) = (serde_json::to_string(a).map_err(err)?, serde_json::to_string(b).map_err(err)?);
            ensure(ja == jb && a == b, || format!("seed {seed}: non-hit query {q} differs"))?;
        }
        for (&q, ids) in &frozen.0 {
            for m in [&rmap, &cmap] {
                let got: Vec<&String> = m[&q].retrieved_ids().collect();
                ensure(got == ids.iter().collect::<Vec<_>>(), || format!("seed {seed}: query {q} drifted under fixed replay"))?;
            }
        }

        let r = run_counterfactual(&w, &p, &banks, &repair, &corrupt, 1000, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        for row in &r.rows {
            for kind in [EditKind::Repair, EditKind::Corrupt] {
                ensure(row.terms(kind, ReplayMode::Fixed).2 == 0.0, || format!("seed {seed}: fixed drift nonzero"))?;
            }
            if !row.target_hit {
                ensure(row.outcome_repair_fixed.to_bits() == row.outcome_corrupt_fixed.to_bits(), || {
                    format!("seed {seed}: non-hit outcome differs")
                })?;
            }
        }
        ensure(r.hit_rows == hit.len() && r.non_hit_rows == miss.len(), || format!("seed {seed}: hit partition differs"))?;
        for a in r.audits.iter().filter(|a| a.mode == ReplayMode::Fixed) {
            ensure(a.drift_term == 0.0 && a.drifted_rows == 0, || format!("seed {seed}: fixed audit drift"))?;
        }
        hits += hit.len();
        non_hits += miss.len();
    }
    ensure(hits > 0 && non_hits > 0, || "degenerate hit partition".into())?;
    Ok(format!("12 worlds, {hits} hit rows, {non_hits} bitwise-identical non-hit rows, fixed drift 0"))
}

fn retirement_rate(sampler: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64, tag: &str) -> Result<f64, String> {
    let mut retired = 0usize;
    for run in 0..1000u64 {
        let mut bank = MemoryBank::new(BankKind::Rule, 2);
        bank.set_fit_episodes(0..30);
        bank.insert(MemoryEntry::new("R0", BankKind::Rule, "p", vec![1.0, 0.0])).map_err(err)?;
        let mut rng = keyed_rng(tag, &[run]);
        for episode_id in 0..30 {
            let utility = sampler(&mut rng);
            bank.append_evidence("R0", EvidenceRecord { episode_id, utility, iteration: 0 }).map_err(err)?;
        }
        retired += bank.retirement_sweep(0.05).map_err(err)?.len();
    }
    Ok(retired as f64 / 1000.0)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    // worst case for a positive mean: all mass on the extremes
    let good = retirement_rate(|r| if r.random::<f64>() < 0.75 { 1.0 } else { -1.0 }, "good")?;
    // paired utilities of a harmful entry: breaks half the steps, never helps
    let bad = retirement_rate(|r| if r.random::<f64>() < 0.5 { -1.0 } else { 0.0 }, "bad")?;
    ensure(good <= 0.05 + 0.02, || format!("mean +0.5 retired in {good}"))?;
    ensure(bad >= 0.95, || format!("mean -0.5 retired in only {bad}"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("mean +0.5 retired {good:.3}, mean -0.5 retired {bad:.3} (n=30, delta=0.05, 1000 sweeps)"))
}

fn stress_policies() -> Vec<(String, PolicyConfig, Arm)> {
    let mut out = vec![
        ("baseline".to_string(), PolicyConfig::default(), Arm::Baseline),
        ("retry".to_string(), gated(BankPolicy::Choose(BankKind::Rule), 0.7), Arm::Retry),
    ];
    let families = [
        BankPolicy::GateOnly(BankKind::Rule),
        BankPolicy::GateOnly(BankKind::Exemplar),
        BankPolicy::Choose(BankKind::Rule),
        BankPolicy::Choose(BankKind::Exemplar),
        BankPolicy::CascadeRuleThenExemplar,
        BankPolicy::CascadeExemplarThenRule,
        BankPolicy::Dual,
    ];
    for bp in families {
        out.push((bp.to_string(), gated(bp, 0.7), Arm::Gated));
        out.push((format!("always_retrieve:{bp}"), gated(bp, 0.7), Arm::AlwaysRetrieve));
    }
    out.push(("fixed_budget_k1".into(), PolicyConfig::default(), Arm::FixedBudget(1)));
    out.push(("fixed_budget_k2".into(), PolicyConfig::default(), Arm::FixedBudget(2)));
    out
}

/// Best reachable episode successes by trying every per-row choice among
/// the baseline and every recorded candidate.
fn brute_force_successes(w: &World, oracle: &[EpisodeTrace]) -> usize {
    let mut total = 0;
    for t in oracle {
        let options: Vec<Vec<f64>> = t
            .steps
            .iter()
            .map(|s| {
                let mut o = vec![w.utility(s.query_id, s.baseline_action)];
                o.extend(s.attempts.iter().map(|a| w.utility(s.query_id, a.second_action)));
                o
            })
            .collect();
        let combos: usize = options.iter().map(Vec::len).product();
        let mut best = false;
        for mut code in 0..combos {
            let mut ok = true;
            for o in &options {
                ok &= o[code % o.len()] >= 1.0;
                code /= o.len();
            }
            best |= ok;
        }
        total += best as usize;
    }
    total
}

fn criterion_4() -> Outcome {
    let policies = stress_policies();
    for seed in 0..32 {
        let w = World::generate(&WorldSpec {
            seed: 400 + seed,
            n_examples: 200,
            decode_seeds: 2,
            steps_per_episode: 1 + (seed % 3) as usize,
            ..WorldSpec::default()
        })
        .map_err(err)?;
        let banks = w.initial_bank_set().map_err(err)?;
        let eps = w.episodes(Stage::Test);
        let oracle = evaluate_oracle(&w, &eps, &PolicyConfig::default(), &banks, RetrievalSource::Live).map_err(err)?;
        let oracle_acc = accuracy(&oracle);
        let omap = step_index(&oracle);
        for (name, p, arm) in &policies {
            let t = evaluate(&w, &eps, p, *arm, &banks, RetrievalSource::Live).map_err(err)?;
            let acc = accuracy(&t);
            ensure(oracle_acc >= acc, || format!("seed {seed}: oracle {oracle_acc} < {name} {acc}"))?;
            for s in t.iter().flat_map(|t| &t.steps) {
                ensure(omap[&s.query_id].final_utility >= s.final_utility, || {
                    format!("seed {seed}: {name} beats the oracle on query {}", s.query_id)
                })?;
            }
        }
    }

    let mut instances = 0;
    for seed in 0..20 {
        let w = World::generate(&WorldSpec {
            seed: 900 + seed,
            n_examples: 8,
            decode_seeds: 1,
            steps_per_episode: 2,
            base_accuracy: 0.5,
            ..WorldSpec::default()
        })
        .map_err(err)?;
        let banks = w.initial_bank_set().map_err(err)?;
        let eps = w.episodes(Stage::Test);
        let oracle = evaluate_oracle(&w, &eps, &PolicyConfig::default(), &banks, RetrievalSource::Live).map_err(err)?;
        let routed: usize = oracle.iter().map(|t| t.routed_count as usize).sum();
        if routed > 10 {
            continue;
        }
        let got = oracle.iter().filter(|t| t.success()).count();
        let best = brute_force_successes(&w, &oracle);
        ensure(got == best, || format!("seed {seed}: oracle {got} vs brute force {best}"))?;
        instances += 1;
    }
    ensure(instances >= 10, || format!("only {instances} small instances"))?;
    Ok(format!(
        "32 seeds x {} policies dominated pointwise; {instances} small instances equal brute force",
        policies.len()
    ))
}

fn criterion_5() -> Outcome {
    for seed in 0..5 {
        let cfg = ExperimentConfig {
            world: WorldSpec {
                seed: 500 + seed,
                n_examples: 1080,
                decode_seeds: 1,
                ..WorldSpec::default()
            },
            settings: ProtocolSettings {
                governance_rounds: 1,
                bootstrap_resamples: 2000,
                ..ProtocolSettings::default()
            },
            ..ExperimentConfig::default()
        };
        let w = World::generate(&cfg.world).map_err(err)?;
        let fit = run_fit_stage(&w, &cfg).map_err(err)?;
        let report =
            run_test_stage(&w, &fit.manifest, &fit.policy, fit.rule, fit.exemplar, &cfg.settings).map_err(err)?;
        let r = report.row("retry_vs_baseline").ok_or("no retry row")?;
        ensure(
            r.n == 540 && r.delta_acc == 0.0 && r.help_hurt == 0 && r.mcnemar_p == 1.0 && (r.ci_lo, r.ci_hi) == (0.0, 0.0),
            || format!("seed {seed}: retry row {}", r.to_csv()),
        )?;
        ensure(r.to_csv().starts_with("retry_vs_baseline,540,0.000000,0.000000,0.000000,1.000000e0,0,"), || {
            format!("seed {seed}: csv {}", r.to_csv())
        })?;
        ensure(
            ledger_check(540, r.delta_acc, r.help_hurt, r.mcnemar_p) == LedgerCheck::Consistent { helps: 0, hurts: 0, p: 1.0 },
            || "retry row does not check".into(),
        )?;
    }
    Ok("5 deterministic-decode worlds (n=540): retry delta 0, p=1, CI [0,0]".into())
}

fn binom_exhaustive(h: u64, u: u64) -> f64 {
    let n = h + u;
    if n == 0 {
        return 1.0;
    }
    let k = h.min(u);
    // count sign vectors at least as extreme in either tail
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let ones = mask.count_ones() as u64;
        if ones <= k || n - ones <= k {
            extreme += 1;
        }
    }
    (extreme as f64 / (1u64 << n) as f64).min(1.0)
}

fn criterion_6() -> Outcome {
    for n in 0..=20u64 {
        for h in 0..=n {
            let (p, q) = (mcnemar_exact(h, n - h), binom_exhaustive(h, n - h));
            ensure((p - q).abs() <= 1e-12, || format!("McNemar h={h} u={}: {p} vs {q}", n - h))?;
        }
    }
    let mut rng = keyed_rng("stats-oracles", &[0]);
    for set in 0..100 {
        let n = rng.random_range(5..60);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 19.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        let auc = roc_auc(&scores, &labels).map_err(err)?;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        ensure((auc - num / den).abs() <= 1e-12, || format!("AUC set {set}"))?;

        let conf: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let m = calibration_metrics(&CalibrationSet::new(conf.clone(), labels.clone()).map_err(err)?, 10).map_err(err)?;
        let nf = n as f64;
        let brier: f64 = conf.iter().zip(&labels).map(|(&c, &y)| (c - y as u8 as f64).powi(2)).sum::<f64>() / nf;
        let nll: f64 = -conf
            .iter()
            .zip(&labels)
            .map(|(&c, &y)| if y { c.max(1e-12).ln() } else { (1.0 - c).max(1e-12).ln() })
            .sum::<f64>()
            / nf;
        let mut ece = 0.0;
        for b in 0..10 {
            let members: Vec<usize> = (0..n).filter(|&i| ((conf[i] * 10.0) as usize).min(9) == b).collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len() as f64;
            let acc = members.iter().filter(|&&i| labels[i]).count() as f64 / k;
            let mc = members.iter().map(|&i| conf[i]).sum::<f64>() / k;
            ece += k / nf * (acc - mc).abs();
        }
        ensure((m.brier - brier).abs() <= 1e-12, || format!("Brier set {set}"))?;
        ensure((m.nll - nll).abs() <= 1e-12, || format!("NLL set {set}"))?;
        ensure((m.ece - ece).abs() <= 1e-12, || format!("ECE set {set}"))?;
    }
    let mut groups = 0;
    for trial in 0..60u64 {
        let (k, m) = (1 + (trial % 6) as usize, 1 + ((trial / 6) % 6) as usize);
        let vals: Vec<f64> = (0..k + m).map(|_| rng.random_range(-1i32..=1) as f64).collect();
        let (hit, non) = vals.split_at(k);
        let r = randomization_interaction_test(hit, non, 100_000, trial).map_err(err)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let observed = mean(hit) - mean(non);
        let (mut ge, mut all) = (0u32, 0u32);
        for mask in 0u32..(1 << (k + m)) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let a: Vec<f64> = (0..k + m).filter(|i| mask >> i & 1 == 1).map(|i| vals[i]).collect();
            let b: Vec<f64> = (0..k + m).filter(|i| mask >> i & 1 == 0).map(|i| vals[i]).collect();
            all += 1;
            ge += (mean(&a) - mean(&b) >= observed - 1e-12) as u32;
        }
        ensure(r.exact && (r.p_value - ge as f64 / all as f64).abs() <= 1e-12, || {
            format!("permutation k={k} m={m}: {} vs {}", r.p_value, ge as f64 / all as f64)
        })?;
        groups += 1;
    }
    Ok(format!("McNemar h+u<=20, AUC/ECE/Brier/NLL on 100 sets, {groups} permutation groups: all exact"))
}

fn criterion_7() -> Outcome {
    let mut parts = Vec::new();
    for (label, n, dacc, hh, p, expect) in [
        ("retry", 540, 0.0019, 1, 1.0, Some((1, 0))),
        ("dual", 600, 0.0700, 42, 9.67e-7, None),
        ("cascade", 600, 0.0767, 46, 3.80e-11, None),
    ] {
        let LedgerCheck::Consistent { helps, hurts, p: q } = ledger_check(n, dacc, hh, p) else {
            return Err(format!("{label}: no consistent (h,u)"));
        };
        ensure(helps as i64 - hurts as i64 == hh, || format!("{label}: h-u != HH"))?;
        ensure(((q - p) / p).abs() <= 0.05, || format!("{label}: p {q} vs {p}"))?;
        if let Some((h, u)) = expect {
            ensure((helps, hurts) == (h, u), || format!("{label}: got ({helps},{hurts})"))?;
        }
        parts.push(format!("{label} h={helps} u={hurts} p={q:.3e}"));
    }
    Ok(parts.join("; "))
}

/// AUC of second-pass confidence for helped versus hurt routed steps.
fn help_hurt_auc(traces: &[EpisodeTrace]) -> Option<f64> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for s in traces.iter().flat_map(|t| &t.steps) {
        for a in &s.attempts {
            if a.second_utility != s.baseline_utility {
                scores.push(a.second_confidence);
                labels.push(a.second_utility > s.baseline_utility);
            }
        }
    }
    roc_auc(&scores, &labels).ok()
}

fn criterion_8() -> Outcome {
    let (mut a_wins, mut b_fails) = (0, 0);
    let (mut auc_a, mut auc_b) = (Vec::new(), Vec::new());
    for seed in 0..50 {
        let w = World::generate(&WorldSpec {
            seed: 800 + seed,
            n_examples: 600,
            second_auc_rule: 0.9,
            second_auc_exemplar: 0.35,
            ..WorldSpec::default()
        })
        .map_err(err)?;
        let banks = w.initial_bank_set().map_err(err)?;
        let eps = w.episodes(Stage::Test);
        let run = |bp| -> Result<Vec<EpisodeTrace>, String> {
            let p = PolicyConfig {
                margin_m: 0.0,
                ..gated(bp, 0.7)
            };
            evaluate(&w, &eps, &p, Arm::Gated, &banks, RetrievalSource::Live).map_err(err)
        };
        let ga = run(BankPolicy::GateOnly(BankKind::Rule))?;
        let gb = run(BankPolicy::GateOnly(BankKind::Exemplar))?;
        auc_a.extend(help_hurt_auc(&ga));
        auc_b.extend(help_hurt_auc(&gb));
        a_wins += (accuracy(&run(BankPolicy::Choose(BankKind::Rule))?) > accuracy(&ga)) as usize;
        b_fails += (accuracy(&run(BankPolicy::Choose(BankKind::Exemplar))?) <= accuracy(&gb)) as usize;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&auc_a), mean(&auc_b));
    ensure(ma >= 0.8 && mb <= 0.5, || format!("realized help/hurt AUC A {ma:.3}, B {mb:.3}"))?;
    ensure(a_wins >= 40 && b_fails >= 40, || format!("choose beats gate_only on A {a_wins}/50, fails on B {b_fails}/50"))?;
    Ok(format!(
        "help/hurt AUC A {ma:.3}, B {mb:.3}; choose > gate_only on A {a_wins}/50, not on B {b_fails}/50"
    ))
}

fn criterion_9() -> Outcome {
    let mut rng = keyed_rng("stress", &[0]);
    let families = [
        BankPolicy::GateOnly(BankKind::Rule),
        BankPolicy::GateOnly(BankKind::Exemplar),
        BankPolicy::Choose(BankKind::Rule),
        BankPolicy::Choose(BankKind::Exemplar),
        BankPolicy::CascadeRuleThenExemplar,
        BankPolicy::CascadeExemplarThenRule,
        BankPolicy::Dual,
    ];
    let (mut steps, mut runs) = (0usize, 0usize);
    for world_seed in 0..12u64 {
        let w = World::generate(&WorldSpec {
            seed: 9000 + world_seed,
            n_examples: 400,
            decode_seeds: 2,
            steps_per_episode: 1 + (world_seed % 4) as usize,
            guard_fail_prob: 0.15,
            ..WorldSpec::default()
        })
        .map_err(err)?;
        let banks = w.initial_bank_set().map_err(err)?;
        let eps = w.episodes(Stage::Test);
        for _ in 0..12 {
            let guards: BTreeSet<Guard> = Guard::ALL.into_iter().filter(|_| rng.random::<bool>()).collect();
            let p = PolicyConfig {
                tau: rng.random_range(0.0..1.05),
                margin_m: rng.random_range(-0.1..0.3),
                guards_enabled: guards,
                bank_policy: families[rng.random_range(0..families.len())],
                budget_b: if rng.random::<bool>() { Some(rng.random_range(0..4)) } else { None },
                cooldown: rng.random_range(0..3),
                confidence_signal: ConfidenceSignal::ALL[rng.random_range(0..3)],
                k_max: rng.random_range(1..4),
                ..PolicyConfig::default()
            };
            let arm = match rng.random_range(0..5) {
                0 => Arm::Retry,
                1 => Arm::AlwaysRetrieve,
                2 => Arm::FixedBudget(rng.random_range(0..3)),
                _ => Arm::Gated,
            };
            let traces = evaluate(&w, &eps, &p, arm, &banks, RetrievalSource::Live).map_err(err)?;
            for t in &traces {
                verify_trace(t, &p, arm).map_err(err)?;
                let routed = t.steps.iter().filter(|s| s.routed).count() as u32;
                let attempts: u32 = t.steps.iter().map(|s| s.attempts.len() as u32).sum();
                ensure(t.total_calls == t.steps.len() as u32 + attempts, || "call accounting".into())?;
                let single = !(arm == Arm::Gated && p.bank_policy.is_cascade());
                if single {
                    ensure(t.total_calls == t.steps.len() as u32 + routed, || "calls != steps + routed".into())?;
                }
                if arm == Arm::Gated || arm == Arm::Retry {
                    if let Some(b) = p.budget_b {
                        ensure(routed <= b, || "budget exceeded".into())?;
                    }
                }
                for s in &t.steps {
                    if !s.accepted {
                        ensure(s.final_action == s.baseline_action && s.final_utility == s.baseline_utility, || {
                            "rejected step changed the output".into()
                        })?;
                    }
                }
            }
            steps += traces.iter().map(|t| t.steps.len()).sum::<usize>();
            runs += 1;

            // routing is monotone in tau without budget or cooldown
            let lo = PolicyConfig { budget_b: None, cooldown: 0, ..p.clone() };
            let hi = PolicyConfig { tau: lo.tau + rng.random_range(0.0..0.3), ..lo.clone() };
            let tl = evaluate(&w, &eps, &lo, Arm::Gated, &banks, RetrievalSource::Live).map_err(err)?;
            let th = evaluate(&w, &eps, &hi, Arm::Gated, &banks, RetrievalSource::Live).map_err(err)?;
            for (a, b) in tl.iter().flat_map(|t| &t.steps).zip(th.iter().flat_map(|t| &t.steps)) {
                ensure(!a.routed || b.routed, || "raising tau un-routed a step".into())?;
            }
            steps += 2 * tl.iter().map(|t| t.steps.len()).sum::<usize>();
        }
    }
    ensure(steps >= 100_000, || format!("only {steps} steps"))?;

    // freeze and stage separation
    let cfg = ExperimentConfig {
        world: WorldSpec { seed: 77, n_examples: 200, decode_seeds: 1, ..WorldSpec::default() },
        settings: ProtocolSettings { governance_rounds: 1, bootstrap_resamples: 1000, ..ProtocolSettings::default() },
        ..ExperimentConfig::default()
    };
    let w = World::generate(&cfg.world).map_err(err)?;
    let fit = run_fit_stage(&w, &cfg).map_err(err)?;
    let mut sealed = fit.rule.clone();
    let rec = EvidenceRecord { episode_id: 0, utility: -1.0, iteration: 0 };
    ensure(matches!(sealed.append_evidence("R0", rec), Err(BankError::ProtocolViolation { .. })), || {
        "sealed bank accepted evidence".into()
    })?;
    ensure(sealed.retirement_sweep(0.05).is_err(), || "sealed bank ran a sweep".into())?;
    let (mut open, _) = w.initial_banks().map_err(err)?;
    let test_episode = w.episodes(Stage::Test)[0].episode_id;
    let rec = EvidenceRecord { episode_id: test_episode, utility: -1.0, iteration: 0 };
    ensure(open.append_evidence("R0", rec).is_err(), || "test-split evidence accepted".into())?;
    let fit_ids: BTreeSet<usize> = w.fit_episode_ids();
    ensure(w.episodes(Stage::Test).iter().all(|e| !fit_ids.contains(&e.episode_id)), || "splits overlap".into())?;
    let tampered = PolicyConfig { margin_m: fit.policy.margin_m + 0.01, ..fit.policy.clone() };
    let r = run_test_stage(&w, &fit.manifest, &tampered, fit.rule.clone(), fit.exemplar.clone(), &cfg.settings);
    ensure(matches!(r, Err(ProtocolError::ManifestMismatch { .. })), || "tampered policy ran".into())?;
    let (unfrozen, _) = w.initial_banks().map_err(err)?;
    let r = run_test_stage(&w, &fit.manifest, &fit.policy, unfrozen, fit.exemplar.clone(), &cfg.settings);
    let changed = fit.rule.freeze().content_hash() != w.initial_banks().map_err(err)?.0.freeze().content_hash();
    ensure(!changed || matches!(r, Err(ProtocolError::ManifestMismatch { .. })), || "ungoverned bank ran".into())?;

    Ok(format!("{runs} random configurations, {steps} steps, 0 violations; freeze checks hold"))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let mut good = 0;
    let mut worst_p: f64 = 0.0;
    for seed in 0..20 {
        let w = World::generate(&WorldSpec {
            seed: 1000 + seed,
            n_examples: 1600,
            fit_fraction: 0.5,
            decode_seeds: 1,
            rule_bank_size: 40,
            edited_bank: BankKind::Rule,
            edited_count: 4,
            edit_topic_queries: Some(105),
            ..WorldSpec::default()
        })
        .map_err(err)?;
        let banks = w.initial_bank_set().map_err(err)?;
        let p = gated(BankPolicy::Choose(BankKind::Rule), 1.01);
        let r = run_counterfactual(&w, &p, &banks, &w.edits(EditKind::Repair), &w.edits(EditKind::Corrupt), 10_000, seed)
            .map_err(err)?;
        ensure(r.rows.len() == 800 && r.hit_rows == 105, || format!("seed {seed}: {} rows, {} hits", r.rows.len(), r.hit_rows))?;
        let pv = r.interaction.map_or(1.0, |i| i.p_value);
        worst_p = worst_p.max(pv);
        good += (r.hit_delta_acc > 0.0 && r.non_hit_delta_acc == 0.0 && pv <= 0.01) as usize;
    }
    ensure(good >= 18, || format!("localized in only {good}/20 seeds"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("105 hits of 800 routed; localized in {good}/20 seeds, max p {worst_p:.4}, {:.1?}", start.elapsed()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("decomposition identity", criterion_1),
        ("fixed-retrieval identification", criterion_2),
        ("Hoeffding retirement guarantee", criterion_3),
        ("oracle dominance", criterion_4),
        ("retry is flat under deterministic decoding", criterion_5),
        ("statistics oracles", criterion_6),
        ("published ledger consistency", criterion_7),
        ("separability-driven gating", criterion_8),
        ("control contracts under stress", criterion_9),
        ("counterfactual localization", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        match f() {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{:.1?}]", i + 1, start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {why} [{:.1?}]", i + 1, start.elapsed());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
