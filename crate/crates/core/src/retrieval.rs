//! Deterministic cosine retrieval, frozen retrieval identities, and content edits.

use crate::bank::{BankSnapshot, SnapshotEntry};
use crate::controller::EpisodeTrace;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Default retrieval threshold for reasoning banks.
pub const DEFAULT_THRESHOLD: f64 = 0.6;
/// Default number of entries injected per bank.
pub const DEFAULT_K_MAX: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("query {query_id} has dimension {got}, bank has {expected}")]
    DimensionMismatch {
        query_id: u64,
        expected: usize,
        got: usize,
    },
    #[error("k_max must be positive")]
    ZeroK,
    #[error("unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("query {0} has conflicting frozen identities")]
    ConflictingIdentity(u64),
    #[error("query {0} has no frozen identity")]
    MissingIdentity(u64),
    #[error("edits line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub retrieved_ids: Vec<String>,
    pub similarities: Vec<f64>,
}

impl RetrievalResult {
    pub fn empty(query_id: u64) -> Self {
        Self {
            query_id,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.retrieved_ids.is_empty()
    }

    /// Merge several per-bank results into one list, re-sorted with the
    /// same ordering rule as [`retrieve`].
    pub fn merged(query_id: u64, parts: impl IntoIterator<Item = RetrievalResult>) -> Self {
        let mut pairs: Vec<(String, f64)> = parts
            .into_iter()
            .flat_map(|r| r.retrieved_ids.into_iter().zip(r.similarities))
            .collect();
        sort_hits(&mut pairs);
        let (retrieved_ids, similarities) = pairs.into_iter().unzip();
        Self {
            query_id,
            retrieved_ids,
            similarities,
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn sort_hits(hits: &mut [(String, f64)]) {
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Up to `k_max` active entries with cosine similarity strictly above
/// `threshold`, most similar first, ties broken by ascending id.
pub fn retrieve(
    query: &Query,
    snapshot: &BankSnapshot,
    threshold: f64,
    k_max: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if k_max == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.embedding.len() != snapshot.dim() {
        return Err(RetrievalError::DimensionMismatch {
            query_id: query.id,
            expected: snapshot.dim(),
            got: query.embedding.len(),
        });
    }
    let mut hits: Vec<(String, f64)> = snapshot
        .entries()
        .iter()
        .filter_map(|e| {
            let s = cosine_similarity(&query.embedding, &e.embedding);
            (s > threshold).then(|| (e.id.clone(), s))
        })
        .collect();
    sort_hits(&mut hits);
    hits.truncate(k_max);
    let (retrieved_ids, similarities) = hits.into_iter().unzip();
    Ok(RetrievalResult {
        query_id: query.id,
        retrieved_ids,
        similarities,
    })
}

/// Retrieved identities of every routed query in a completed run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrozenRetrievalMap(pub BTreeMap<u64, Vec<String>>);

impl FrozenRetrievalMap {
    pub fn insert(&mut self, query_id: u64, ids: Vec<String>) -> Result<(), RetrievalError> {
        match self.0.get(&query_id) {
            Some(existing) if *existing != ids => Err(RetrievalError::ConflictingIdentity(query_id)),
            _ => {
                self.0.insert(query_id, ids);
                Ok(())
            }
        }
    }

    pub fn lookup(&self, query_id: u64) -> Result<&[String], RetrievalError> {
        self.0
            .get(&query_id)
            .map(Vec::as_slice)
            .ok_or(RetrievalError::MissingIdentity(query_id))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.keys().copied()
    }
}

/// Record the retrieved identities of each routed step. Steps with several
/// attempts contribute the concatenation of their attempts' identities.
pub fn freeze_identities(traces: &[EpisodeTrace]) -> Result<FrozenRetrievalMap, RetrievalError> {
    let mut map = FrozenRetrievalMap::default();
    for step in traces.iter().flat_map(|t| &t.steps).filter(|s| s.routed) {
        let ids = step
            .attempts
            .iter()
            .flat_map(|a| a.retrieved.retrieved_ids.iter().cloned())
            .collect();
        map.insert(step.query_id, ids)?;
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Repair,
    Corrupt,
}

impl EditKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EditKind::Repair => "repair",
            EditKind::Corrupt => "corrupt",
        }
    }
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "repair" => Ok(EditKind::Repair),
            "corrupt" => Ok(EditKind::Corrupt),
            other => Err(format!("unknown edit kind `{other}`")),
        }
    }
}

/// Payload replacement for one entry. Never touches id or embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentEdit {
    pub entry_id: String,
    pub edit_kind: EditKind,
    pub new_payload: String,
}

pub fn apply_edits(
    snapshot: &BankSnapshot,
    edits: &[ContentEdit],
) -> Result<BankSnapshot, RetrievalError> {
    let mut entries: Vec<SnapshotEntry> = snapshot.entries().to_vec();
    for edit in edits {
        let entry = entries
            .iter_mut()
            .find(|e| e.id == edit.entry_id)
            .ok_or_else(|| RetrievalError::UnknownEntry(edit.entry_id.clone()))?;
        entry.payload = edit.new_payload.clone();
    }
    Ok(BankSnapshot::new(snapshot.kind(), snapshot.dim(), entries))
}

/// Split routed queries by whether their frozen identity touches an edited entry.
pub fn target_hit_partition(
    frozen: &FrozenRetrievalMap,
    edited_ids: &BTreeSet<String>,
) -> (Vec<u64>, Vec<u64>) {
    let mut hits = Vec::new();
    let mut misses = Vec::new();
    for (&q, ids) in &frozen.0 {
        if ids.iter().any(|id| edited_ids.contains(id)) {
            hits.push(q);
        } else {
            misses.push(q);
        }
    }
    (hits, misses)
}

pub fn parse_edits(text: &str) -> Result<Vec<ContentEdit>, RetrievalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RetrievalError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_edits(edits: &[ContentEdit]) -> String {
    edits
        .iter()
        .map(|e| serde_json::to_string(e).expect("edit serializes") + "\n")
        .collect()
}
