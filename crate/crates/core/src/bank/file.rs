//! Line-delimited bank file.
//!
//! One entry per line, five tab-separated fields:
//!
//! ```text
//! id <TAB> bank_kind <TAB> payload <TAB> embedding <TAB> status
//! ```
//!
//! The payload escapes `\\`, tab, newline and carriage return. The embedding is
//! a space-separated list of fixed-width decimals (`+0.123456789`). Lines
//! starting with `#` are comments.

use super::{BankError, BankKind, EntryStatus, MemoryBank, MemoryEntry};

/// Fixed-width decimal form of one embedding component.
pub fn format_embedding_value(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:+.9}")
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(text: &str, line: usize) -> Result<String, BankError> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(BankError::Parse {
                    line,
                    msg: format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_bank(bank: &MemoryBank) -> String {
    let mut out = format!("# bank {} dim {}\n", bank.kind(), bank.dim());
    for e in bank.entries() {
        let emb: Vec<String> = e.embedding.iter().map(|&x| format_embedding_value(x)).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            escape(&e.id),
            e.bank_kind,
            escape(&e.payload),
            emb.join(" "),
            e.status.as_str()
        ));
    }
    out
}

/// Parse a bank file. The bank kind and dimension come from the first entry.
pub fn parse_bank(text: &str) -> Result<MemoryBank, BankError> {
    let mut bank: Option<MemoryBank> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 5 {
            return Err(BankError::Parse {
                line,
                msg: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let id = unescape(fields[0], line)?;
        let kind: BankKind = fields[1]
            .parse()
            .map_err(|msg| BankError::Parse { line, msg })?;
        let payload = unescape(fields[2], line)?;
        let embedding = fields[3]
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>().map_err(|e| BankError::Parse {
                    line,
                    msg: format!("bad embedding value `{v}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let status = match fields[4].trim() {
            "active" => EntryStatus::Active,
            "retired" => EntryStatus::Retired,
            other => {
                return Err(BankError::Parse {
                    line,
                    msg: format!("unknown status `{other}`"),
                })
            }
        };
        let b = bank.get_or_insert_with(|| MemoryBank::new(kind, embedding.len()));
        let mut entry = MemoryEntry::new(id, kind, payload, embedding);
        entry.status = status;
        b.insert(entry)?;
    }
    bank.ok_or(BankError::Parse {
        line: 0,
        msg: "bank file has no entries".into(),
    })
}
