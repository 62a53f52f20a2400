//! `memgate`: generate worlds, run the locked fit/test protocol, replay
//! counterfactual edits, and check published ledger rows.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use memgate::bank::{parse_bank, write_bank, MemoryBank};
use memgate::controller::{BankSet, PolicyConfig};
use memgate::protocol::{
    ledger_check, run_counterfactual, run_fit_stage, run_governance_loop, run_test_stage, split_edits,
    write_ledger_csv, ExperimentConfig, FreezeManifest, LedgerCheck,
};
use memgate::retrieval::{parse_edits, write_edits, EditKind};
use memgate::worldsim::World;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "memgate", version, about = "Applicability control for prompt memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat key=value); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the world seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the world spec, initial banks, outcome table, and edit lists.
    GenWorld(Common),
    /// Run governance and the grid search on the fit split, then freeze.
    Fit(Common),
    /// Evaluate the frozen policy on the test split.
    Test {
        #[command(flatten)]
        common: Common,
        /// Manifest written by `fit`; the policy and banks are read beside it.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Replay the frozen policy under repair and corrupt edits.
    Counterfactual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// JSON-lines content edits; defaults to the world's own edit set.
        #[arg(long)]
        edits: Option<PathBuf>,
    },
    /// Run the governance loop alone on the initial banks.
    Governance(Common),
    /// Search integer help/hurt counts behind a published row:
    /// `ledger-check n=540 dacc=0.0019 hh=1 p=1`.
    LedgerCheck {
        #[arg(required = true)]
        fields: Vec<String>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(common: &Common) -> Result<(ExperimentConfig, World)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::parse(&read(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.world.seed = seed;
    }
    let world = World::generate(&cfg.world).context("generating world")?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok((cfg, world))
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

struct Frozen {
    manifest: FreezeManifest,
    policy: PolicyConfig,
    rule: MemoryBank,
    exemplar: MemoryBank,
}

fn load_frozen(manifest: Option<&PathBuf>) -> Result<Frozen> {
    let Some(path) = manifest else {
        bail!("no manifest given; run `memgate fit` first and pass --manifest <out>/manifest.json");
    };
    let manifest = FreezeManifest::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let policy = PolicyConfig::from_flat(&read(&dir.join("policy.cfg"))?).context("parsing policy.cfg")?;
    let rule = parse_bank(&read(&dir.join("rule.bank"))?).context("parsing rule.bank")?;
    let exemplar = parse_bank(&read(&dir.join("exemplar.bank"))?).context("parsing exemplar.bank")?;
    Ok(Frozen {
        manifest,
        policy,
        rule,
        exemplar,
    })
}

fn gen_world(common: &Common) -> Result<()> {
    let (_, world) = load(common)?;
    let (rule, exemplar) = world.initial_banks()?;
    let out = &common.out;
    write(out, "world.cfg", &world.spec().to_flat())?;
    write(out, "rule.bank", &write_bank(&rule))?;
    write(out, "exemplar.bank", &write_bank(&exemplar))?;
    write(out, "outcomes.json", &json(&world.outcome_table())?)?;
    let mut edits = world.edits(EditKind::Repair);
    edits.extend(world.edits(EditKind::Corrupt));
    write(out, "edits.jsonl", &write_edits(&edits))?;
    println!("world {} written to {}", world.hash(), out.display());
    Ok(())
}

fn fit(common: &Common) -> Result<()> {
    let (cfg, world) = load(common)?;
    let fit = run_fit_stage(&world, &cfg)?;
    let out = &common.out;
    write(out, "manifest.json", &(fit.manifest.to_json() + "\n"))?;
    write(out, "policy.cfg", &fit.policy.to_flat())?;
    write(out, "rule.bank", &write_bank(&fit.rule))?;
    write(out, "exemplar.bank", &write_bank(&fit.exemplar))?;
    write(out, "governance.json", &json(&fit.governance)?)?;
    write(out, "candidates.json", &json(&fit.candidates)?)?;
    let s = &fit.manifest.selection_record;
    println!(
        "selected {} tau={} m={} signal={} budget={:?} iteration={} (fit delta_acc {:+.4}, {} candidates)",
        s.bank_policy,
        s.tau,
        s.margin_m,
        s.confidence_signal,
        s.budget_b,
        s.governance_iteration,
        s.fit_delta_acc,
        s.candidates_evaluated
    );
    Ok(())
}

fn test(common: &Common, manifest: Option<&PathBuf>) -> Result<()> {
    let frozen = load_frozen(manifest)?;
    let (cfg, world) = load(common)?;
    let report = run_test_stage(&world, &frozen.manifest, &frozen.policy, frozen.rule, frozen.exemplar, &cfg.settings)?;
    let out = &common.out;
    let ledger = write_ledger_csv(&report.rows);
    write(out, "ledger.csv", &ledger)?;
    write(out, "traces.jsonl", &report.traces_jsonl())?;
    write(out, "conf_bins.csv", &report.conf_bins_csv())?;
    write(out, "calibration.json", &json(&report.calibration)?)?;
    print!("{ledger}");
    Ok(())
}

fn counterfactual(common: &Common, manifest: Option<&PathBuf>, edits: Option<&PathBuf>) -> Result<()> {
    let frozen = load_frozen(manifest)?;
    let (cfg, world) = load(common)?;
    let mut rule = frozen.rule;
    let mut exemplar = frozen.exemplar;
    rule.seal();
    exemplar.seal();
    let banks = BankSet::new(Some(rule.freeze()), Some(exemplar.freeze()));
    frozen.manifest.validate(&frozen.policy, &banks, &world.hash())?;
    let (repair, corrupt) = match edits {
        Some(path) => split_edits(&parse_edits(&read(path)?).with_context(|| format!("parsing {}", path.display()))?),
        None => (world.edits(EditKind::Repair), world.edits(EditKind::Corrupt)),
    };
    if repair.is_empty() && corrupt.is_empty() {
        bail!("no edits to replay; set edited_count in the world config or pass --edits");
    }
    let report = run_counterfactual(
        &world,
        &frozen.policy,
        &banks,
        &repair,
        &corrupt,
        cfg.settings.n_permutations,
        cfg.settings.stats_seed,
    )?;
    let out = &common.out;
    write(out, "counterfactual_rows.csv", &report.rows_csv())?;
    let summary = serde_json::json!({
        "audits": report.audits,
        "hit_rows": report.hit_rows,
        "non_hit_rows": report.non_hit_rows,
        "hit_delta_acc": report.hit_delta_acc,
        "non_hit_delta_acc": report.non_hit_delta_acc,
        "interaction": report.interaction,
    });
    write(out, "counterfactual.json", &json(&summary)?)?;
    let p = report.interaction.map(|i| format!("{:.4}", i.p_value)).unwrap_or_else(|| "n/a".into());
    println!(
        "{} routed rows, {} target hits: hit delta_acc {:+.4}, non-hit {:+.4}, interaction p {p}",
        report.rows.len(),
        report.hit_rows,
        report.hit_delta_acc,
        report.non_hit_delta_acc
    );
    Ok(())
}

fn governance(common: &Common) -> Result<()> {
    let (cfg, world) = load(common)?;
    let outcome = run_governance_loop(&world, &cfg.policy, world.initial_banks()?, cfg.settings.governance_rounds)?;
    let out = &common.out;
    let (rule, exemplar) = outcome.selected_banks();
    write(out, "governance.json", &json(&outcome.report)?)?;
    write(out, "rule.bank", &write_bank(rule))?;
    write(out, "exemplar.bank", &write_bank(exemplar))?;
    for it in &outcome.report.iterations {
        let gap = it.gap_close.map(|g| format!("{g:.4}")).unwrap_or_else(|| "absent".into());
        println!(
            "iteration {}: fit accuracy {:.4}, gap-close {gap}, retired {}",
            it.iteration,
            it.fit_accuracy,
            it.retired.len()
        );
    }
    println!("selected iteration {}", outcome.report.selected);
    Ok(())
}

fn ledger_check_cmd(fields: &[String]) -> Result<()> {
    let (mut n, mut dacc, mut hh, mut p) = (None, None, None, None);
    for f in fields {
        let Some((k, v)) = f.split_once('=') else {
            bail!("expected key=value, got `{f}`");
        };
        let bad = || format!("bad value for {k}: `{v}`");
        match k {
            "n" => n = Some(v.parse::<u64>().with_context(bad)?),
            "dacc" => dacc = Some(v.parse::<f64>().with_context(bad)?),
            "hh" => hh = Some(v.parse::<i64>().with_context(bad)?),
            "p" => p = Some(v.parse::<f64>().with_context(bad)?),
            other => bail!("unknown field `{other}`; expected n, dacc, hh, p"),
        }
    }
    let (Some(n), Some(dacc), Some(hh), Some(p)) = (n, dacc, hh, p) else {
        bail!("ledger-check needs n=, dacc=, hh= and p=");
    };
    match ledger_check(n, dacc, hh, p) {
        LedgerCheck::Consistent { helps, hurts, p } => println!("consistent h={helps} u={hurts} p={p:.4e}"),
        LedgerCheck::Inconsistent => println!("inconsistent"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(c) => gen_world(&c),
        Command::Fit(c) => fit(&c),
        Command::Test { common, manifest } => test(&common, manifest.as_ref()),
        Command::Counterfactual { common, manifest, edits } => counterfactual(&common, manifest.as_ref(), edits.as_ref()),
        Command::Governance(c) => governance(&c),
        Command::LedgerCheck { fields } => ledger_check_cmd(&fields),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
