use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
n_examples = 240
decode_seeds = 2
edited_count = 3
governance_rounds = 1
bootstrap_resamples = 1000
n_permutations = 2000
bank_policy = choose:rule
grid.tau = 0.6,0.8
";

fn memgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memgate")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fit_into(dir: &Path) -> (String, String) {
    let cfg = dir.join("exp.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let fit = dir.join("fit");
    ok(&memgate(&["fit", "--config", path(&cfg), "--out", path(&fit)]));
    (path(&cfg).to_string(), path(&fit.join("manifest.json")).to_string())
}

#[test]
fn ledger_check_reports_published_rows() {
    let out = ok(&memgate(&["ledger-check", "n=540", "dacc=0.0019", "hh=1", "p=1"]));
    assert!(out.starts_with("consistent h=1 u=0"), "{out}");
    let out = ok(&memgate(&["ledger-check", "n=600", "dacc=0.0700", "hh=42", "p=9.67e-7"]));
    assert!(out.starts_with("consistent h=58 u=16"), "{out}");
    let out = ok(&memgate(&["ledger-check", "n=600", "dacc=0.3", "hh=42", "p=9.67e-7"]));
    assert_eq!(out.trim(), "inconsistent");
}

#[test]
fn malformed_input_exits_nonzero_with_a_message() {
    for args in [
        vec!["frobnicate"],
        vec!["ledger-check", "n=abc", "dacc=0", "hh=0", "p=1"],
        vec!["ledger-check", "n=10", "dacc=0"],
    ] {
        let out = memgate(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "n_examples = 100\nno_such_key = 1\n").unwrap();
    let out = memgate(&["fit", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn test_without_a_manifest_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = memgate(&["test", "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    let missing = dir.path().join("nowhere/manifest.json");
    let out = memgate(&["test", "--manifest", path(&missing), "--out", path(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn gen_world_writes_the_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("world");
    ok(&memgate(&["gen-world", "--config", path(&cfg), "--seed", "4", "--out", path(&out)]));
    for f in ["world.cfg", "rule.bank", "exemplar.bank", "outcomes.json", "edits.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let spec = fs::read_to_string(out.join("world.cfg")).unwrap();
    assert!(spec.lines().any(|l| l.replace(' ', "") == "seed=4"), "{spec}");
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("outcomes.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 240 * 2);
    assert_eq!(fs::read_to_string(out.join("edits.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn fit_then_test_is_deterministic_and_locked() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = fit_into(dir.path());
    let fit_dir = Path::new(&manifest).parent().unwrap().to_path_buf();
    for f in ["manifest.json", "policy.cfg", "rule.bank", "exemplar.bank", "governance.json"] {
        assert!(fit_dir.join(f).exists(), "{f} missing");
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&memgate(&["test", "--config", &cfg, "--manifest", &manifest, "--out", path(&a)]));
    ok(&memgate(&["test", "--config", &cfg, "--manifest", &manifest, "--out", path(&b)]));
    let ledger = fs::read_to_string(a.join("ledger.csv")).unwrap();
    assert_eq!(ledger, fs::read_to_string(b.join("ledger.csv")).unwrap());
    assert!(ledger.starts_with("comparison,n,delta_acc,ci_lo,ci_hi,mcnemar_p,help_hurt,delta_calls,routed_frac,accepted_frac\n"));
    assert!(ledger.contains("\nretry_vs_baseline,240,0.000000,0.000000,0.000000,1.000000e0,0,"));
    for f in ["traces.jsonl", "conf_bins.csv", "calibration.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }

    // another seed is another world, which the manifest does not cover
    let out = memgate(&["test", "--config", &cfg, "--seed", "9", "--manifest", &manifest, "--out", path(&a)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest mismatch"));

    // hand-edited policy file
    let policy = fit_dir.join("policy.cfg");
    let text = fs::read_to_string(&policy).unwrap();
    let tampered: String = text
        .lines()
        .map(|l| if l.starts_with("margin_m") { "margin_m = 0.5".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&policy, tampered + "\n").unwrap();
    let out = memgate(&["test", "--config", &cfg, "--manifest", &manifest, "--out", path(&a)]);
    assert!(!out.status.success());
}

#[test]
fn counterfactual_and_governance_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = fit_into(dir.path());
    let cf = dir.path().join("cf");
    let out = ok(&memgate(&["counterfactual", "--config", &cfg, "--manifest", &manifest, "--out", path(&cf)]));
    assert!(out.contains("target hits"), "{out}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cf.join("counterfactual.json")).unwrap()).unwrap();
    assert_eq!(summary["non_hit_delta_acc"], 0.0);
    for a in summary["audits"].as_array().unwrap() {
        assert_eq!(a["max_residual"], 0.0);
    }
    assert!(cf.join("counterfactual_rows.csv").exists());

    // an explicit edit file naming an entry that does not exist
    let edits = dir.path().join("edits.jsonl");
    fs::write(&edits, "{\"entry_id\":\"R999\",\"edit_kind\":\"repair\",\"new_payload\":\"x\"}\n").unwrap();
    let out = memgate(&["counterfactual", "--config", &cfg, "--manifest", &manifest, "--edits", path(&edits), "--out", path(&cf)]);
    assert!(!out.status.success());

    let gov = dir.path().join("gov");
    let out = ok(&memgate(&["governance", "--config", &cfg, "--out", path(&gov)]));
    assert!(out.contains("selected iteration"), "{out}");
    assert!(gov.join("governance.json").exists() && gov.join("rule.bank").exists());
}
