//! Rule and exemplar memory banks.
//!
//! A [`MemoryBank`] owns entries together with their paired-utility evidence.
//! Evidence may only be appended, and entries may only be retired, while the
//! bank is in the fit stage. [`MemoryBank::freeze`] produces an immutable
//! [`BankSnapshot`] whose content hash covers the active ids, payloads, and
//! embeddings, never the evidence.

mod file;

pub use file::{format_embedding_value, parse_bank, write_bank};

use crate::keyed::sha256_hex;
use crate::stage::Stage;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Default retirement confidence.
pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("entry `{0}` is retired")]
    RetiredEntry(String),
    #[error("duplicate entry id `{0}`")]
    DuplicateId(String),
    #[error("entry `{id}` has embedding length {got}, bank expects {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("entry `{id}` is a {got} entry, bank holds {expected} entries")]
    KindMismatch {
        id: String,
        expected: BankKind,
        got: BankKind,
    },
    #[error("utility {0} outside [-1, 1]")]
    UtilityOutOfRange(f64),
    #[error("episode {0} is not in the fit split")]
    EpisodeOutsideFit(usize),
    #[error("protocol violation: `{op}` called during {stage} stage")]
    ProtocolViolation { op: &'static str, stage: Stage },
    #[error("evidence count must be at least 1")]
    ZeroCount,
    #[error("delta {0} outside (0, 1)")]
    InvalidDelta(f64),
    #[error("bank file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Rule,
    Exemplar,
}

impl BankKind {
    pub const ALL: [BankKind; 2] = [BankKind::Rule, BankKind::Exemplar];

    pub fn as_str(self) -> &'static str {
        match self {
            BankKind::Rule => "rule",
            BankKind::Exemplar => "exemplar",
        }
    }
}

impl fmt::Display for BankKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BankKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rule" => Ok(BankKind::Rule),
            "exemplar" => Ok(BankKind::Exemplar),
            other => Err(format!("unknown bank kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Active,
    Retired,
}

impl EntryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryStatus::Active => "active",
            EntryStatus::Retired => "retired",
        }
    }
}

/// One paired-utility observation: second-pass utility minus baseline utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub episode_id: usize,
    pub utility: f64,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: String,
    pub bank_kind: BankKind,
    pub payload: String,
    pub embedding: Vec<f64>,
    pub status: EntryStatus,
    evidence: Vec<EvidenceRecord>,
}

impl MemoryEntry {
    /// Embedding components are quantized to the bank-file precision so the
    /// in-memory entry and its serialized form hash identically.
    pub fn new(
        id: impl Into<String>,
        bank_kind: BankKind,
        payload: impl Into<String>,
        embedding: Vec<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            bank_kind,
            payload: payload.into(),
            embedding: embedding.into_iter().map(quantize).collect(),
            status: EntryStatus::Active,
            evidence: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == EntryStatus::Active
    }

    pub fn evidence(&self) -> &[EvidenceRecord] {
        &self.evidence
    }

    pub fn evidence_count(&self) -> usize {
        self.evidence.len()
    }

    pub fn mean_utility(&self) -> Option<f64> {
        if self.evidence.is_empty() {
            return None;
        }
        Some(self.evidence.iter().map(|r| r.utility).sum::<f64>() / self.evidence.len() as f64)
    }

    /// Hoeffding upper bound on the mean utility, `None` without evidence.
    pub fn utility_ucb(&self, delta: f64) -> Result<Option<f64>, BankError> {
        match self.mean_utility() {
            None => Ok(None),
            Some(mean) => hoeffding_ucb(mean, self.evidence.len(), delta).map(Some),
        }
    }
}

/// Round-trip an embedding value through its fixed-width text form.
pub fn quantize(x: f64) -> f64 {
    format_embedding_value(x)
        .trim()
        .parse()
        .expect("formatted float parses")
}

/// `mean + sqrt(ln(2/delta) / (2n))` for utilities supported on [-1, 1].
pub fn hoeffding_ucb(mean: f64, n: usize, delta: f64) -> Result<f64, BankError> {
    if n == 0 {
        return Err(BankError::ZeroCount);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(BankError::InvalidDelta(delta));
    }
    Ok(mean + ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    kind: BankKind,
    dim: usize,
    entries: Vec<MemoryEntry>,
    index: HashMap<String, usize>,
    stage: Stage,
    fit_episodes: Option<BTreeSet<usize>>,
}

impl MemoryBank {
    pub fn new(kind: BankKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
            stage: Stage::Fit,
            fit_episodes: None,
        }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn active(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().filter(|e| e.is_active())
    }

    pub fn get(&self, id: &str) -> Option<&MemoryEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    /// Restrict evidence to episodes of the fit split.
    pub fn set_fit_episodes(&mut self, episodes: impl IntoIterator<Item = usize>) {
        self.fit_episodes = Some(episodes.into_iter().collect());
    }

    /// Move the bank into the test stage. There is no way back.
    pub fn seal(&mut self) {
        self.stage = Stage::Test;
    }

    fn require_fit(&self, op: &'static str) -> Result<(), BankError> {
        match self.stage {
            Stage::Fit => Ok(()),
            stage => Err(BankError::ProtocolViolation { op, stage }),
        }
    }

    pub fn insert(&mut self, entry: MemoryEntry) -> Result<(), BankError> {
        self.require_fit("insert")?;
        if entry.bank_kind != self.kind {
            return Err(BankError::KindMismatch {
                id: entry.id,
                expected: self.kind,
                got: entry.bank_kind,
            });
        }
        if entry.embedding.len() != self.dim {
            return Err(BankError::DimensionMismatch {
                id: entry.id,
                expected: self.dim,
                got: entry.embedding.len(),
            });
        }
        if self.index.contains_key(&entry.id) {
            return Err(BankError::DuplicateId(entry.id));
        }
        self.index.insert(entry.id.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    /// Append one paired-utility observation; returns the new evidence count.
    pub fn append_evidence(
        &mut self,
        entry_id: &str,
        record: EvidenceRecord,
    ) -> Result<usize, BankError> {
        self.require_fit("append_evidence")?;
        if !(-1.0..=1.0).contains(&record.utility) {
            return Err(BankError::UtilityOutOfRange(record.utility));
        }
        if let Some(fit) = &self.fit_episodes {
            if !fit.contains(&record.episode_id) {
                return Err(BankError::EpisodeOutsideFit(record.episode_id));
            }
        }
        let &i = self
            .index
            .get(entry_id)
            .ok_or_else(|| BankError::UnknownEntry(entry_id.to_string()))?;
        let entry = &mut self.entries[i];
        if !entry.is_active() {
            return Err(BankError::RetiredEntry(entry_id.to_string()));
        }
        entry.evidence.push(record);
        Ok(entry.evidence.len())
    }

    /// Retire every active entry whose Hoeffding UCB is below zero.
    ///
    /// Entries without evidence are never touched.
    pub fn retirement_sweep(&mut self, delta: f64) -> Result<Vec<String>, BankError> {
        self.require_fit("retirement_sweep")?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(BankError::InvalidDelta(delta));
        }
        let mut retired = Vec::new();
        for entry in self.entries.iter_mut().filter(|e| e.is_active()) {
            if let Some(ucb) = entry.utility_ucb(delta)? {
                if ucb < 0.0 {
                    entry.status = EntryStatus::Retired;
                    retired.push(entry.id.clone());
                }
            }
        }
        Ok(retired)
    }

    pub fn freeze(&self) -> BankSnapshot {
        BankSnapshot::new(
            self.kind,
            self.dim,
            self.active()
                .map(|e| SnapshotEntry {
                    id: e.id.clone(),
                    payload: e.payload.clone(),
                    embedding: e.embedding.clone(),
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub id: String,
    pub payload: String,
    pub embedding: Vec<f64>,
}

/// Immutable view of a bank's active entries.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    kind: BankKind,
    dim: usize,
    entries: Vec<SnapshotEntry>,
    index: HashMap<String, usize>,
    content_hash: String,
}

impl BankSnapshot {
    pub fn new(kind: BankKind, dim: usize, entries: Vec<SnapshotEntry>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        let content_hash = content_hash(&entries);
        Self {
            kind,
            dim,
            entries,
            index,
            content_hash,
        }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[SnapshotEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&SnapshotEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn active_entry_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn manifest(&self) -> SnapshotManifest {
        SnapshotManifest {
            bank_kind: self.kind,
            active_entry_ids: self.active_entry_ids(),
            content_hash: self.content_hash.clone(),
        }
    }
}

/// JSON form of a frozen snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub bank_kind: BankKind,
    pub active_entry_ids: Vec<String>,
    pub content_hash: String,
}

/// Digest over (id, payload, embedding text) of each entry, sorted by id.
fn content_hash(entries: &[SnapshotEntry]) -> String {
    let mut sorted: Vec<&SnapshotEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut buf = String::new();
    for e in sorted {
        buf.push_str(&e.id);
        buf.push('\u{1f}');
        buf.push_str(&e.payload);
        buf.push('\u{1f}');
        for x in &e.embedding {
            buf.push_str(&format_embedding_value(*x));
        }
        buf.push('\u{1e}');
    }
    sha256_hex(buf.as_bytes())
}
