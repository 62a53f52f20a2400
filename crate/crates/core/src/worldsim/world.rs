use super::confidence::ConfidenceModel;
use super::embedding::topic_embedding;
use super::{WorldError, WorldSpec};
use crate::bank::{quantize, BankKind, BankSnapshot, MemoryBank, MemoryEntry, SnapshotEntry};
use crate::controller::{
    oracle_episode, Action, BankSet, ConfidenceSignal, Context, Decode, DecisionEnv,
    GuardResults, PolicyConfig, RetrievalSource, SecondPass,
};
use crate::keyed::{derive_key, keyed_rng, keyed_uniform};
use crate::retrieval::{ContentEdit, EditKind, Query};
use crate::stage::Stage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Noise amplitude of each confidence signal around the latent confidence.
fn signal_noise(signal: ConfidenceSignal) -> f64 {
    match signal {
        ConfidenceSignal::MeanLogprob => 0.0,
        ConfidenceSignal::SumLogprob => 0.05,
        ConfidenceSignal::FirstToken => 0.35,
    }
}

fn signal_view(latent: f64, noise: f64, signal: ConfidenceSignal) -> f64 {
    (latent + signal_noise(signal) * noise).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentVersion {
    Original,
    Repair,
    Corrupt,
}

impl ContentVersion {
    fn tag(self) -> u64 {
        match self {
            ContentVersion::Original => 0,
            ContentVersion::Repair => 1,
            ContentVersion::Corrupt => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryInfo {
    pub kind: BankKind,
    pub topic: usize,
    pub applicability: f64,
    pub toxic: bool,
    pub edited: bool,
    key: u64,
    payloads: [String; 3],
}

impl EntryInfo {
    pub fn version(&self, payload: &str) -> ContentVersion {
        match self.payloads.iter().position(|p| p == payload) {
            Some(1) => ContentVersion::Repair,
            Some(2) => ContentVersion::Corrupt,
            _ => ContentVersion::Original,
        }
    }

    pub fn payload(&self, version: ContentVersion) -> &str {
        &self.payloads[version.tag() as usize]
    }
}

#[derive(Debug, Clone, Copy)]
struct ContextRow {
    help_u: f64,
    hurt_u: f64,
    conf_u: f64,
    noise: f64,
    guards: GuardResults,
}

#[derive(Debug, Clone, Copy)]
struct Row {
    gold: i64,
    base_correct: bool,
    base_u: f64,
    base_noise: f64,
    ctx: [ContextRow; 3],
}

fn ctx_index(ctx: Context) -> usize {
    match ctx {
        Context::Rule => 0,
        Context::Exemplar => 1,
        Context::Dual => 2,
    }
}

/// The query ids of one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRef {
    pub episode_id: usize,
    pub example: usize,
    pub replica: usize,
    pub query_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextOutcome {
    pub correct_if_applicable: bool,
    pub correct_if_inapplicable: bool,
    pub confidence_if_correct: f64,
    pub confidence_if_incorrect: f64,
    pub guards: GuardResults,
}

/// Pretabulated outcomes of one query under every second-pass context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcomeRow {
    pub example_id: usize,
    pub replica: usize,
    pub step: usize,
    pub query_id: u64,
    pub topic: usize,
    pub split: Stage,
    pub gold: i64,
    pub baseline_correct: bool,
    pub baseline_confidence: f64,
    pub second_by_context: BTreeMap<Context, ContextOutcome>,
}

/// A generated world: banks, queries, and outcome tables.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    n_items: usize,
    is_fit: Vec<bool>,
    item_topic: Vec<usize>,
    queries: Vec<Query>,
    rows: Vec<Row>,
    entries: BTreeMap<String, EntryInfo>,
    base_model: ConfidenceModel,
    second_models: [ConfidenceModel; 3],
}

impl World {
    pub fn generate(spec: &WorldSpec) -> Result<World, WorldError> {
        spec.validate()?;
        let seed = spec.seed;
        let n_items = spec.n_examples * spec.steps_per_episode;

        // split by a keyed permutation of examples
        let mut order: Vec<usize> = (0..spec.n_examples).collect();
        order.sort_by_key(|&e| derive_key("split", &[seed, e as u64]));
        let mut is_fit = vec![false; spec.n_examples];
        for &e in &order[..spec.n_fit_examples()] {
            is_fit[e] = true;
        }

        let item_topic = assign_topics(spec, &is_fit);
        let dim = spec.topic_count + spec.noise_dim;
        let mut queries = Vec::with_capacity(n_items * spec.decode_seeds);
        for replica in 0..spec.decode_seeds {
            for (item, &topic) in item_topic.iter().enumerate() {
                let embedding = topic_embedding(
                    seed,
                    topic,
                    derive_key("query", &[seed, item as u64]),
                    spec.topic_count,
                    spec.noise_dim,
                    spec.topic_weight,
                );
                debug_assert_eq!(embedding.len(), dim);
                queries.push(Query {
                    id: (replica * n_items + item) as u64,
                    embedding,
                    text: Some(format!("example {} step {} topic {topic}", item / spec.steps_per_episode, item % spec.steps_per_episode)),
                });
            }
        }

        let mut rng = keyed_rng("rows", &[seed]);
        let guard = |rng: &mut rand_chacha::ChaCha8Rng| rng.random::<f64>() >= spec.guard_fail_prob;
        let rows = (0..n_items * spec.decode_seeds)
            .map(|_| {
                let gold = rng.random_range(0..1_000_000i64);
                let base_correct = rng.random::<f64>() < spec.base_accuracy;
                let base_u = rng.random::<f64>();
                let base_noise = rng.random_range(-1.0..1.0);
                let ctx = std::array::from_fn(|_| ContextRow {
                    help_u: rng.random(),
                    hurt_u: rng.random(),
                    conf_u: rng.random(),
                    noise: rng.random_range(-1.0..1.0),
                    guards: GuardResults {
                        format: guard(&mut rng),
                        valid: guard(&mut rng),
                        progress: guard(&mut rng),
                        contract: guard(&mut rng),
                    },
                });
                Row {
                    gold,
                    base_correct,
                    base_u,
                    base_noise,
                    ctx,
                }
            })
            .collect();

        Ok(World {
            entries: build_entries(spec),
            base_model: ConfidenceModel::for_auc(spec.baseline_auc),
            second_models: Context::ALL.map(|c| ConfidenceModel::for_auc(spec.second_auc(c))),
            spec: spec.clone(),
            n_items,
            is_fit,
            item_topic,
            queries,
            rows,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn hash(&self) -> String {
        self.spec.hash()
    }

    pub fn dim(&self) -> usize {
        self.spec.topic_count + self.spec.noise_dim
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn query_topic(&self, query_id: u64) -> usize {
        self.item_topic[query_id as usize % self.n_items]
    }

    pub fn episode_id(&self, replica: usize, example: usize) -> usize {
        replica * self.spec.n_examples + example
    }

    /// Episodes of one split in ascending id order.
    pub fn episodes(&self, split: Stage) -> Vec<EpisodeRef> {
        let want_fit = split == Stage::Fit;
        let steps = self.spec.steps_per_episode;
        let mut out = Vec::new();
        for replica in 0..self.spec.decode_seeds {
            for example in (0..self.spec.n_examples).filter(|&e| self.is_fit[e] == want_fit) {
                out.push(EpisodeRef {
                    episode_id: self.episode_id(replica, example),
                    example,
                    replica,
                    query_ids: (0..steps)
                        .map(|s| (replica * self.n_items + example * steps + s) as u64)
                        .collect(),
                });
            }
        }
        out
    }

    pub fn fit_episode_ids(&self) -> BTreeSet<usize> {
        self.episodes(Stage::Fit).iter().map(|e| e.episode_id).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&EntryInfo> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &EntryInfo)> {
        self.entries.iter()
    }

    /// Fresh fit-stage banks holding every entry in its original version.
    pub fn initial_banks(&self) -> Result<(MemoryBank, MemoryBank), WorldError> {
        let fit = self.fit_episode_ids();
        let make = |kind: BankKind| -> Result<MemoryBank, WorldError> {
            let mut bank = MemoryBank::new(kind, self.dim());
            bank.set_fit_episodes(fit.iter().copied());
            let mut ids: Vec<(&String, &EntryInfo)> =
                self.entries.iter().filter(|(_, e)| e.kind == kind).collect();
            ids.sort_by_key(|(_, e)| e.key_order());
            for (id, info) in ids {
                bank.insert(MemoryEntry::new(
                    id.clone(),
                    kind,
                    info.payload(ContentVersion::Original),
                    self.entry_embedding(info, info.topic, info.key),
                ))?;
            }
            Ok(bank)
        };
        Ok((make(BankKind::Rule)?, make(BankKind::Exemplar)?))
    }

    pub fn initial_bank_set(&self) -> Result<BankSet, WorldError> {
        let (rule, exemplar) = self.initial_banks()?;
        Ok(BankSet::new(Some(rule.freeze()), Some(exemplar.freeze())))
    }

    fn entry_embedding(&self, _info: &EntryInfo, topic: usize, key: u64) -> Vec<f64> {
        topic_embedding(
            self.spec.seed,
            topic,
            key,
            self.spec.topic_count,
            self.spec.noise_dim,
            self.spec.topic_weight,
        )
    }

    pub fn edited_ids(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.edited)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Content edits moving every edited entry to the given version.
    pub fn edits(&self, kind: EditKind) -> Vec<ContentEdit> {
        let version = match kind {
            EditKind::Repair => ContentVersion::Repair,
            EditKind::Corrupt => ContentVersion::Corrupt,
        };
        self.entries
            .iter()
            .filter(|(_, e)| e.edited)
            .map(|(id, e)| ContentEdit {
                entry_id: id.clone(),
                edit_kind: kind,
                new_payload: e.payload(version).to_string(),
            })
            .collect()
    }

    /// Re-encode a snapshot as a free rerun would: entries whose payload is
    /// an edited version may move to another topic.
    pub fn reembed(&self, snapshot: &BankSnapshot) -> BankSnapshot {
        let t = self.spec.topic_count as u64;
        let entries = snapshot
            .entries()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if let Some(info) = self.entries.get(&e.id) {
                    let v = info.version(&e.payload);
                    if v != ContentVersion::Original
                        && keyed_uniform("drift", &[self.spec.seed, info.key, v.tag()])
                            < self.spec.drift_prob
                    {
                        let k = derive_key("drift-topic", &[self.spec.seed, info.key, v.tag()]);
                        let topic = ((info.topic as u64 + 1 + k % (t - 1)) % t) as usize;
                        e.embedding = self
                            .entry_embedding(info, topic, k)
                            .into_iter()
                            .map(quantize)
                            .collect();
                    }
                }
                e
            })
            .collect();
        BankSnapshot::new(snapshot.kind(), snapshot.dim(), entries)
    }

    fn replica_item(&self, query_id: u64) -> (u64, u64) {
        let q = query_id as usize;
        ((q / self.n_items) as u64, (q % self.n_items) as u64)
    }

    fn entry_applicable(&self, query_id: u64, entry: &SnapshotEntry, info: &EntryInfo) -> bool {
        let p = match info.version(&entry.payload) {
            ContentVersion::Original => info.applicability,
            ContentVersion::Repair => self.spec.repair_applicability,
            ContentVersion::Corrupt => self.spec.corrupt_applicability,
        };
        let (replica, item) = self.replica_item(query_id);
        keyed_uniform("applicable", &[self.spec.seed, replica, item, info.key]) < p
    }

    fn second_correct(&self, row: &Row, ctx: &ContextRow, applicable: bool, poisoned: bool) -> bool {
        if poisoned {
            false
        } else if row.base_correct {
            applicable || ctx.hurt_u >= self.spec.hurt_prob_given_inapplicable
        } else {
            applicable && ctx.help_u < self.spec.help_prob_given_applicable
        }
    }

    pub fn outcome_table(&self) -> Vec<ExampleOutcomeRow> {
        let steps = self.spec.steps_per_episode;
        self.rows
            .iter()
            .enumerate()
            .map(|(q, row)| {
                let item = q % self.n_items;
                let example = item / steps;
                let second_by_context = Context::ALL
                    .into_iter()
                    .map(|c| {
                        let cr = &row.ctx[ctx_index(c)];
                        let m = &self.second_models[ctx_index(c)];
                        (
                            c,
                            ContextOutcome {
                                correct_if_applicable: self.second_correct(row, cr, true, false),
                                correct_if_inapplicable: self.second_correct(row, cr, false, false),
                                confidence_if_correct: m.sample(true, cr.conf_u),
                                confidence_if_incorrect: m.sample(false, cr.conf_u),
                                guards: cr.guards,
                            },
                        )
                    })
                    .collect();
                ExampleOutcomeRow {
                    example_id: example,
                    replica: q / self.n_items,
                    step: item % steps,
                    query_id: q as u64,
                    topic: self.item_topic[item],
                    split: if self.is_fit[example] { Stage::Fit } else { Stage::Test },
                    gold: row.gold,
                    baseline_correct: row.base_correct,
                    baseline_confidence: self.base_model.sample(row.base_correct, row.base_u),
                    second_by_context,
                }
            })
            .collect()
    }
}

impl EntryInfo {
    fn key_order(&self) -> (usize, u64) {
        (self.topic, self.key)
    }
}

fn assign_topics(spec: &WorldSpec, is_fit: &[bool]) -> Vec<usize> {
    let seed = spec.seed;
    let t = spec.topic_count as u64;
    let n_items = spec.n_examples * spec.steps_per_episode;
    let free_topic = |item: usize, lo: u64| {
        (lo + derive_key("topic", &[seed, item as u64]) % (t - lo)) as usize
    };
    let Some(k_test) = spec.edit_topic_queries else {
        return (0..n_items).map(|i| free_topic(i, 0)).collect();
    };
    let mut topics: Vec<usize> = (0..n_items).map(|i| free_topic(i, 1)).collect();
    let split_items = |fit: bool| {
        let mut items: Vec<usize> = (0..n_items)
            .filter(|&i| is_fit[i / spec.steps_per_episode] == fit)
            .collect();
        items.sort_by_key(|&i| derive_key("topic-order", &[seed, i as u64]));
        items
    };
    let test_items = split_items(false);
    let fit_items = split_items(true);
    let k_fit = (k_test as f64 * fit_items.len() as f64 / test_items.len() as f64).round() as usize;
    for &i in test_items.iter().take(k_test).chain(fit_items.iter().take(k_fit)) {
        topics[i] = 0;
    }
    topics
}

fn build_entries(spec: &WorldSpec) -> BTreeMap<String, EntryInfo> {
    let seed = spec.seed;
    let mut out = BTreeMap::new();
    for (kind_tag, kind) in BankKind::ALL.into_iter().enumerate() {
        let size = spec.bank_size(kind);
        let prefix = match kind {
            BankKind::Rule => "R",
            BankKind::Exemplar => "X",
        };
        let edited = |j: usize| {
            kind == spec.edited_bank
                && j.is_multiple_of(spec.topic_count)
                && j / spec.topic_count < spec.edited_count
        };
        let mut candidates: Vec<usize> = (0..size).filter(|&j| !edited(j)).collect();
        candidates.sort_by_key(|&j| derive_key("toxic", &[seed, kind_tag as u64, j as u64]));
        let n_toxic = (spec.toxic_fraction * size as f64).round() as usize;
        let toxic: BTreeSet<usize> = candidates.into_iter().take(n_toxic).collect();

        let base = spec.applicability(kind);
        for j in 0..size {
            let id = format!("{prefix}{j}");
            let topic = j % spec.topic_count;
            let u = keyed_uniform("applicability", &[seed, kind_tag as u64, j as u64]);
            let applicability = if toxic.contains(&j) {
                0.0
            } else {
                (base + spec.applicability_spread * (2.0 * u - 1.0)).clamp(0.0, 1.0)
            };
            let stem = format!("{kind} {id} topic {topic}");
            out.insert(
                id,
                EntryInfo {
                    kind,
                    topic,
                    applicability,
                    toxic: toxic.contains(&j),
                    edited: edited(j),
                    key: derive_key("entry", &[seed, kind_tag as u64, j as u64]),
                    payloads: [
                        format!("{stem}: guidance"),
                        format!("{stem}: guidance (repaired)"),
                        format!("{stem}: guidance (corrupted)"),
                    ],
                },
            );
        }
    }
    out
}

impl DecisionEnv for World {
    fn query(&self, query_id: u64) -> &Query {
        &self.queries[query_id as usize]
    }

    fn baseline(&self, query_id: u64, signal: ConfidenceSignal) -> Decode {
        let row = &self.rows[query_id as usize];
        let latent = self.base_model.sample(row.base_correct, row.base_u);
        Decode {
            action: Action(if row.base_correct { row.gold } else { row.gold + 1 }),
            confidence: signal_view(latent, row.base_noise, signal),
        }
    }

    /// Decoding is deterministic: the rerun reproduces the baseline.
    fn retry(&self, query_id: u64, signal: ConfidenceSignal) -> Decode {
        self.baseline(query_id, signal)
    }

    fn second_pass(
        &self,
        query_id: u64,
        signal: ConfidenceSignal,
        context: Context,
        injected: &[&SnapshotEntry],
    ) -> SecondPass {
        if injected.is_empty() {
            return SecondPass {
                decode: self.retry(query_id, signal),
                guards: GuardResults::PASS,
            };
        }
        let row = &self.rows[query_id as usize];
        let cr = &row.ctx[ctx_index(context)];
        let mut poisoned = false;
        let mut applicable = false;
        for e in injected {
            if let Some(info) = self.entries.get(&e.id) {
                poisoned |= info.toxic;
                applicable |= self.entry_applicable(query_id, e, info);
            }
        }
        let correct = self.second_correct(row, cr, applicable && !poisoned, poisoned);
        let latent = self.second_models[ctx_index(context)].sample(correct, cr.conf_u);
        SecondPass {
            decode: Decode {
                action: Action(if correct { row.gold } else { row.gold + 2 }),
                confidence: signal_view(latent, cr.noise, signal),
            },
            guards: cr.guards,
        }
    }

    fn utility(&self, query_id: u64, action: Action) -> f64 {
        if action.0 == self.rows[query_id as usize].gold {
            1.0
        } else {
            0.0
        }
    }
}

/// Oracle accuracy over every episode of the world.
pub fn oracle_accuracy(world: &World, policy: &PolicyConfig) -> Result<f64, WorldError> {
    let banks = world.initial_bank_set()?;
    let mut eps = world.episodes(Stage::Fit);
    eps.extend(world.episodes(Stage::Test));
    let mut hits = 0usize;
    for ep in &eps {
        let t = oracle_episode(world, ep.episode_id, &ep.query_ids, policy, &banks, RetrievalSource::Live)?;
        hits += t.success() as usize;
    }
    Ok(hits as f64 / eps.len() as f64)
}

/// Bisect `help_prob_given_applicable` until the oracle reaches `target`.
/// Returns the tuned spec and its realized oracle accuracy.
pub fn calibrate_help_prob(
    spec: &WorldSpec,
    target: f64,
    policy: &PolicyConfig,
) -> Result<(WorldSpec, f64), WorldError> {
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (spec.clone(), f64::NAN);
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        let s = WorldSpec {
            help_prob_given_applicable: mid,
            ..spec.clone()
        };
        let acc = oracle_accuracy(&World::generate(&s)?, policy)?;
        if best.1.is_nan() || (acc - target).abs() < (best.1 - target).abs() {
            best = (s, acc);
        }
        if acc < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}
