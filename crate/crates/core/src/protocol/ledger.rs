use super::evaluate::{mean_calls, outcomes, step_fractions};
use super::ProtocolError;
use crate::controller::EpisodeTrace;
use crate::stats::{bootstrap_ci, mcnemar_exact, PairedComparison};
use serde::{Deserialize, Serialize};

pub const LEDGER_HEADER: &str =
    "comparison,n,delta_acc,ci_lo,ci_hi,mcnemar_p,help_hurt,delta_calls,routed_frac,accepted_frac";

/// One paired comparison of an arm against a reference arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub comparison: String,
    pub n: usize,
    pub delta_acc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub mcnemar_p: f64,
    pub help_hurt: i64,
    /// Extra model calls per episode.
    pub delta_calls: f64,
    pub routed_frac: f64,
    pub accepted_frac: f64,
}

impl LedgerRow {
    pub fn from_traces(
        comparison: &str,
        reference: &[EpisodeTrace],
        arm: &[EpisodeTrace],
        resamples: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        let pc = PairedComparison::new(outcomes(reference), outcomes(arm))?;
        let (ci_lo, ci_hi) = bootstrap_ci(&pc.diffs(), resamples, alpha, seed)?;
        let (routed_frac, accepted_frac) = step_fractions(arm);
        Ok(Self {
            comparison: comparison.to_string(),
            n: pc.n(),
            delta_acc: pc.delta_acc(),
            ci_lo,
            ci_hi,
            mcnemar_p: pc.mcnemar_p(),
            help_hurt: pc.help_hurt(),
            delta_calls: mean_calls(arm) - mean_calls(reference),
            routed_frac,
            accepted_frac,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6e},{},{:.6},{:.6},{:.6}",
            self.comparison,
            self.n,
            self.delta_acc,
            self.ci_lo,
            self.ci_hi,
            self.mcnemar_p,
            self.help_hurt,
            self.delta_calls,
            self.routed_frac,
            self.accepted_frac
        )
    }
}

pub fn write_ledger_csv(rows: &[LedgerRow]) -> String {
    let mut out = String::from(LEDGER_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Re-derive a row from the traces it summarizes.
pub fn check_row(
    row: &LedgerRow,
    reference: &[EpisodeTrace],
    arm: &[EpisodeTrace],
) -> Result<(), ProtocolError> {
    let fail = |what: String| ProtocolError::InconsistentRow {
        row: row.comparison.clone(),
        what,
    };
    let pc = PairedComparison::new(outcomes(reference), outcomes(arm))?;
    if row.n != pc.n() || row.help_hurt != pc.help_hurt() {
        return Err(fail(format!("n/HH {}/{} vs {}/{}", row.n, row.help_hurt, pc.n(), pc.help_hurt())));
    }
    if (row.delta_acc * row.n as f64 - row.help_hurt as f64).abs() > 1e-9 {
        return Err(fail(format!("delta_acc * n = {} but HH = {}", row.delta_acc * row.n as f64, row.help_hurt)));
    }
    if row.mcnemar_p != mcnemar_exact(pc.helps(), pc.hurts()) {
        return Err(fail("McNemar p does not match the discordant counts".into()));
    }
    if row.ci_lo.partial_cmp(&row.ci_hi).is_none_or(|o| o.is_gt()) {
        return Err(fail("CI bounds out of order".into()));
    }
    let steps: u32 = arm.iter().map(|t| t.steps.len() as u32).sum();
    let calls: u32 = arm.iter().map(|t| t.total_calls).sum();
    let recount: u32 = arm
        .iter()
        .flat_map(|t| &t.steps)
        .map(|s| 1 + s.attempts.len() as u32)
        .sum();
    if calls != recount || calls < steps {
        return Err(fail(format!("total calls {calls} vs {recount} from steps")));
    }
    let d = mean_calls(arm) - mean_calls(reference);
    if (d - row.delta_calls).abs() > 1e-12 {
        return Err(fail(format!("delta_calls {} vs {d}", row.delta_calls)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LedgerCheck {
    Consistent { helps: u64, hurts: u64, p: f64 },
    Inconsistent,
}

/// Search integer discordant counts behind a published row: `h - u = hh`,
/// `|dacc * n - hh| < 0.5`, and exact McNemar p within 5% relative of `p`.
/// Scans `u` upwards and reports the first solution.
pub fn ledger_check(n: u64, dacc: f64, hh: i64, p: f64) -> LedgerCheck {
    if (dacc * n as f64 - hh as f64).abs() >= 0.5 {
        return LedgerCheck::Inconsistent;
    }
    for u in 0..=n {
        let h = hh + u as i64;
        if h < 0 {
            continue;
        }
        let h = h as u64;
        if h + u > n {
            break;
        }
        let q = mcnemar_exact(h, u);
        let close = if p == 0.0 { q == 0.0 } else { ((q - p) / p).abs() <= 0.05 };
        if close {
            return LedgerCheck::Consistent { helps: h, hurts: u, p: q };
        }
    }
    LedgerCheck::Inconsistent
}
