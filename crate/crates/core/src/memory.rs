//! The fast system: a style-partitioned memory store with two-layer
//! retrieval (weighted Manhattan scenario filter, then cosine similarity of
//! hashed experience embeddings).

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    memory_to_record, record_to_memory, DrivingStyle, ExperienceDescription, EpisodeOutcome, MemoryUnit, MetaAction,
    RecordError, ScenarioDescription,
};

pub const EMBEDDING_DIM: usize = 64;
/// Seed mixed into the FNV-1a offset basis of the token hash.
pub const HASH_SEED: u64 = 0x5eed_a11c_e5ee_d5ed;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// Similarities are compared after rounding to this resolution so that
/// floating-point noise cannot reorder equal-text candidates.
pub const SIMILARITY_RESOLUTION: f64 = 1e-9;

/// Frames this many ticks before an unsafe instant are discarded.
pub const CURATION_WINDOW_TICKS: u64 = 10;
/// Predicted arrival gap (s) below which an instant counts as unsafe.
pub const UNSAFE_GAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Line { line: usize, source: RecordError },
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("invalid retrieval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub epsilon: f64,
    pub weights: [f64; 9],
    pub widen_factor: f64,
    pub max_widenings: u32,
    pub embedding_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            epsilon: 4.0,
            weights: [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0],
            widen_factor: 2.0,
            max_widenings: 2,
            embedding_dim: EMBEDDING_DIM,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if !(self.epsilon > 0.0) {
            return Err(MemoryError::Config("epsilon must be positive".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MemoryError::Config("weights must be non-negative".into()));
        }
        if !(self.widen_factor >= 1.0) {
            return Err(MemoryError::Config("widen_factor must be at least 1".into()));
        }
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(MemoryError::Config(format!("embedding_dim must be {EMBEDDING_DIM}")));
        }
        Ok(())
    }
}

/// Which retrieval pipeline the Actor runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalMode {
    /// Search only the block of the inferred style (plus the General fallback).
    pub partitioned: bool,
    /// Scenario filter then experience selection; otherwise one cosine argmax
    /// over embedding ⊕ min-max normalized scenario.
    pub two_layer: bool,
}

impl RetrievalMode {
    pub const PARTITIONED: RetrievalMode = RetrievalMode {
        partitioned: true,
        two_layer: true,
    };
    pub const POOLED: RetrievalMode = RetrievalMode {
        partitioned: false,
        two_layer: true,
    };
    pub const SINGLE_STAGE: RetrievalMode = RetrievalMode {
        partitioned: true,
        two_layer: false,
    };
}

impl Default for RetrievalMode {
    fn default() -> Self {
        Self::PARTITIONED
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub [f64; EMBEDDING_DIM]);

impl Embedding {
    pub fn zero() -> Self {
        Embedding([0.0; EMBEDDING_DIM])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait Embedder: Send + Sync {
    fn embed_fields(&self, fields: [&str; 4]) -> Embedding;
}

/// Bag-of-tokens feature hashing into 64 buckets.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

pub fn token_bucket(token: &str) -> usize {
    let mut h = FNV_OFFSET ^ HASH_SEED;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h % EMBEDDING_DIM as u64) as usize
}

impl Embedder for HashingEmbedder {
    fn embed_fields(&self, fields: [&str; 4]) -> Embedding {
        let text = fields.join(" | ").to_lowercase();
        let mut v = [0.0; EMBEDDING_DIM];
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            v[token_bucket(token)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding(v)
    }
}

pub fn embed_experience(e: &ExperienceDescription) -> Embedding {
    HashingEmbedder.embed_fields(e.fields())
}

/// Cosine similarity; any zero vector scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn quantize(similarity: f64) -> i64 {
    (similarity / SIMILARITY_RESOLUTION).round() as i64
}

pub fn weighted_manhattan(a: &ScenarioDescription, b: &ScenarioDescription, weights: &[f64; 9]) -> f64 {
    let mut d = 0.0;
    for k in 0..9 {
        d += weights[k] * (a.0[k] - b.0[k]).abs();
    }
    d
}

#[derive(Clone)]
pub struct MemoryBlock {
    pub style: DrivingStyle,
    units: Vec<MemoryUnit>,
    embeddings: Vec<Embedding>,
    lo: [f64; 9],
    hi: [f64; 9],
}

impl fmt::Debug for MemoryBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryBlock")
            .field("style", &self.style)
            .field("len", &self.units.len())
            .finish()
    }
}

impl PartialEq for MemoryBlock {
    fn eq(&self, other: &Self) -> bool {
        self.style == other.style && self.units == other.units
    }
}

impl MemoryBlock {
    fn new(style: DrivingStyle) -> Self {
        MemoryBlock {
            style,
            units: Vec::new(),
            embeddings: Vec::new(),
            lo: [f64::INFINITY; 9],
            hi: [f64::NEG_INFINITY; 9],
        }
    }

    pub fn units(&self) -> &[MemoryUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    fn push(&mut self, m: MemoryUnit, embedding: Embedding) {
        for k in 0..9 {
            self.lo[k] = self.lo[k].min(m.scenario.0[k]);
            self.hi[k] = self.hi[k].max(m.scenario.0[k]);
        }
        self.units.push(m);
        self.embeddings.push(embedding);
    }

    /// Scenario values rescaled by this block's per-coordinate range.
    pub fn normalize(&self, s: &ScenarioDescription) -> [f64; 9] {
        let mut out = [0.0; 9];
        for k in 0..9 {
            let span = self.hi[k] - self.lo[k];
            out[k] = if span > 0.0 { (s.0[k] - self.lo[k]) / span } else { 0.0 };
        }
        out
    }
}

/// `D = ⋃ D_θ`: one block per driving style.
#[derive(Clone)]
pub struct MemoryStore {
    blocks: [MemoryBlock; 3],
    embedder: Arc<dyn Embedder>,
}

impl fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.blocks.iter()).finish()
    }
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.blocks == other.blocks
    }
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::with_embedder(Arc::new(HashingEmbedder))
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_embedder(embedder: Arc<dyn Embedder>) -> Self {
        MemoryStore {
            blocks: DrivingStyle::ALL.map(MemoryBlock::new),
            embedder,
        }
    }

    pub fn insert(&mut self, m: MemoryUnit) {
        let embedding = self.embedder.embed_fields(m.experience.fields());
        self.blocks[m.style().index()].push(m, embedding);
    }

    pub fn block(&self, style: DrivingStyle) -> &MemoryBlock {
        &self.blocks[style.index()]
    }

    pub fn blocks(&self) -> &[MemoryBlock; 3] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(MemoryBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn units(&self) -> impl Iterator<Item = &MemoryUnit> {
        self.blocks.iter().flat_map(|b| b.units.iter())
    }

    pub fn embed(&self, fields: [&str; 4]) -> Embedding {
        self.embedder.embed_fields(fields)
    }
}

impl Extend<MemoryUnit> for MemoryStore {
    fn extend<T: IntoIterator<Item = MemoryUnit>>(&mut self, iter: T) {
        for m in iter {
            self.insert(m);
        }
    }
}

/// Drops failed episodes entirely and, otherwise, every frame that lies
/// within one second before an instant whose predicted arrival gap is unsafe.
/// `gaps` pairs a tick with the predicted |Δt| at that tick.
pub fn curate_episode(frames: Vec<MemoryUnit>, outcome: EpisodeOutcome, gaps: &[(u64, f64)]) -> Vec<MemoryUnit> {
    if !outcome.is_success() {
        return Vec::new();
    }
    let unsafe_ticks: Vec<u64> = gaps
        .iter()
        .filter(|(_, g)| g.abs() < UNSAFE_GAP)
        .map(|(t, _)| *t)
        .collect();
    frames
        .into_iter()
        .filter(|m| {
            let t = m.frame_index;
            !unsafe_ticks
                .iter()
                .any(|&u| t <= u && u - t <= CURATION_WINDOW_TICKS)
        })
        .collect()
}

/// Layer one: units within `cfg.epsilon` of `s_c`, in block order, with their distance.
pub fn scenario_filter<'a>(
    block: &'a MemoryBlock,
    s_c: &ScenarioDescription,
    cfg: &RetrievalConfig,
) -> Vec<(&'a MemoryUnit, f64)> {
    block
        .units
        .iter()
        .filter_map(|m| {
            let d = weighted_manhattan(s_c, &m.scenario, &cfg.weights);
            (d < cfg.epsilon).then_some((m, d))
        })
        .collect()
}

/// Layer two over an explicit candidate list.
pub fn select_by_experience<'a>(
    candidates: &[(&'a MemoryUnit, f64)],
    e_c: &ExperienceDescription,
) -> Result<&'a MemoryUnit, MemoryError> {
    let q = embed_experience(e_c);
    let scored: Vec<_> = candidates
        .iter()
        .map(|(m, d)| (*m, *d, cosine(&q.0, &embed_experience(&m.experience).0)))
        .collect();
    best(scored.iter().map(|(m, d, s)| (*m, *d, *s)))
        .map(|(m, _, _)| m)
        .ok_or(MemoryError::EmptyCandidates)
}

// Highest quantized similarity; then smaller distance; then smaller key;
// then earliest in scan order.
fn best<'a>(
    items: impl Iterator<Item = (&'a MemoryUnit, f64, f64)>,
) -> Option<(&'a MemoryUnit, f64, f64)> {
    let mut best: Option<(&MemoryUnit, f64, f64)> = None;
    for (m, d, s) in items {
        let better = match best {
            None => true,
            Some((bm, bd, bs)) => {
                let (q, bq) = (quantize(s), quantize(bs));
                q > bq || (q == bq && (d < bd || (d == bd && m.key() < bm.key())))
            }
        };
        if better {
            best = Some((m, d, s));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Unit {
        style: DrivingStyle,
        episode_id: u64,
        frame_index: u64,
        distance: f64,
        similarity: f64,
        widenings: u32,
    },
    Default,
}

impl Provenance {
    pub fn is_default(&self) -> bool {
        matches!(self, Provenance::Default)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Unit {
                style,
                episode_id,
                frame_index,
                ..
            } => write!(f, "{style}:{episode_id}:{frame_index}"),
            Provenance::Default => f.write_str("default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub action: MetaAction,
    pub provenance: Provenance,
    /// Units whose scenario was examined.
    pub scanned: usize,
}

impl Retrieval {
    fn default_action(scanned: usize) -> Self {
        Retrieval {
            action: MetaAction::Maintain,
            provenance: Provenance::Default,
            scanned,
        }
    }

    fn from_unit(m: &MemoryUnit, distance: f64, similarity: f64, widenings: u32, scanned: usize) -> Self {
        Retrieval {
            action: m.action,
            provenance: Provenance::Unit {
                style: m.style(),
                episode_id: m.episode_id,
                frame_index: m.frame_index,
                distance,
                similarity,
                widenings,
            },
            scanned,
        }
    }
}

type Scored<'a> = (&'a MemoryUnit, f64, f64);

// Two-layer search over a sequence of (unit, embedding) pairs with ε widening.
fn two_layer<'a>(
    items: &[(&'a MemoryUnit, &'a Embedding)],
    s_c: &ScenarioDescription,
    q: &Embedding,
    cfg: &RetrievalConfig,
) -> Option<(Scored<'a>, u32)> {
    let distances: Vec<f64> = items
        .iter()
        .map(|(m, _)| weighted_manhattan(s_c, &m.scenario, &cfg.weights))
        .collect();
    let mut eps = cfg.epsilon;
    for widenings in 0..=cfg.max_widenings {
        let found = best(
            items
                .iter()
                .zip(&distances)
                .filter(|(_, d)| **d < eps)
                .map(|((m, e), d)| (*m, *d, cosine(&q.0, &e.0))),
        );
        if let Some(hit) = found {
            return Some((hit, widenings));
        }
        eps *= cfg.widen_factor;
    }
    None
}

fn block_items(block: &MemoryBlock) -> Vec<(&MemoryUnit, &Embedding)> {
    block.units.iter().zip(&block.embeddings).collect()
}

fn single_stage<'a>(blocks: &[&'a MemoryBlock], s_c: &ScenarioDescription, q: &Embedding) -> Option<Scored<'a>> {
    let mut candidates = Vec::new();
    let mut unit_vec = Vec::with_capacity(EMBEDDING_DIM + 9);
    for block in blocks {
        let mut query = q.0.to_vec();
        query.extend_from_slice(&block.normalize(s_c));
        for (m, e) in block.units.iter().zip(&block.embeddings) {
            unit_vec.clear();
            unit_vec.extend_from_slice(&e.0);
            unit_vec.extend_from_slice(&block.normalize(&m.scenario));
            candidates.push((m, 0.0, cosine(&query, &unit_vec)));
        }
    }
    best(candidates.into_iter())
}

/// Retrieval with a precomputed query embedding.
pub fn retrieve_embedded(
    store: &MemoryStore,
    mode: RetrievalMode,
    style: DrivingStyle,
    s_c: &ScenarioDescription,
    q: &Embedding,
    cfg: &RetrievalConfig,
) -> Retrieval {
    // Candidate block groups, tried in order until one yields a unit.
    let groups: Vec<Vec<&MemoryBlock>> = if mode.partitioned {
        let mut order = vec![vec![store.block(style)]];
        if style != DrivingStyle::General {
            order.push(vec![store.block(DrivingStyle::General)]);
        }
        order
    } else {
        vec![store.blocks.iter().collect()]
    };
    let mut scanned = 0;
    for group in groups {
        let size: usize = group.iter().map(|b| b.len()).sum();
        if size == 0 {
            continue;
        }
        scanned += size;
        if mode.two_layer {
            let items: Vec<_> = group.iter().flat_map(|b| block_items(b)).collect();
            if let Some(((m, d, sim), w)) = two_layer(&items, s_c, q, cfg) {
                return Retrieval::from_unit(m, d, sim, w, scanned);
            }
        } else if let Some((m, _, sim)) = single_stage(&group, s_c, q) {
            return Retrieval::from_unit(m, 0.0, sim, 0, scanned);
        }
    }
    Retrieval::default_action(scanned)
}

/// Partitioned two-layer retrieval; total, falling back to the General block
/// and finally to `Maintain`.
pub fn retrieve(
    store: &MemoryStore,
    style: DrivingStyle,
    s_c: &ScenarioDescription,
    e_c: &ExperienceDescription,
    cfg: &RetrievalConfig,
) -> Retrieval {
    let q = store.embed(e_c.fields());
    retrieve_embedded(store, RetrievalMode::PARTITIONED, style, s_c, &q, cfg)
}

/// JSONL, blocks in style order.
pub fn save_store(store: &MemoryStore, path: &Path) -> Result<(), MemoryError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for m in store.units() {
        out.write_all(memory_to_record(m).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<MemoryStore, MemoryError> {
    let reader = io::BufReader::new(fs::File::open(path)?);
    let mut store = MemoryStore::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let unit = record_to_memory(&line).map_err(|source| MemoryError::Line { line: i + 1, source })?;
        store.insert(unit);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Intention;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(style: DrivingStyle, scenario: [f64; 9], ehmi: &str, action: MetaAction, key: u64) -> MemoryUnit {
        MemoryUnit {
            scenario: ScenarioDescription::new(scenario),
            experience: ExperienceDescription {
                intention: Intention::Yield,
                style,
                instruction: String::new(),
                ehmi: ehmi.to_string(),
            },
            action,
            episode_id: key,
            frame_index: 0,
        }
    }

    // Independent reimplementation of the token hash and embedding.
    fn oracle_embed(fields: [&str; 4]) -> Vec<f64> {
        let mut text = String::new();
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                text.push_str(" | ");
            }
            text.push_str(&f.to_lowercase());
        }
        let mut counts = vec![0.0f64; 64];
        let mut token = String::new();
        for ch in text.chars().chain(std::iter::once(' ')) {
            if ch.is_alphanumeric() {
                token.push(ch);
            } else if !token.is_empty() {
                let mut h: u64 = 14695981039346656037 ^ HASH_SEED;
                for b in token.as_bytes() {
                    h = (h ^ *b as u64).wrapping_mul(1099511628211);
                }
                counts[(h % 64) as usize] += 1.0;
                token.clear();
            }
        }
        let n: f64 = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.0 {
            for c in &mut counts {
                *c /= n;
            }
        }
        counts
    }

    #[test]
    fn insert_partitions() {
        let mut store = MemoryStore::new();
        for (k, s) in DrivingStyle::ALL.into_iter().enumerate() {
            store.insert(unit(s, [0.0; 9], "x", MetaAction::Maintain, k as u64));
        }
        for s in DrivingStyle::ALL {
            assert_eq!(store.block(s).len(), 1);
            assert_eq!(store.block(s).units()[0].style(), s);
        }
        store.insert(unit(DrivingStyle::General, [1.0; 9], "y", MetaAction::Maintain, 9));
        let g = store.block(DrivingStyle::General).units();
        assert_eq!((g[0].episode_id, g[1].episode_id), (0, 9));
        assert_eq!(store.len(), 4);
    }

    #[test]
    fn manhattan_hand_arithmetic() {
        let a = ScenarioDescription::new([0.0; 9]);
        let mut b = [0.0; 9];
        b[0] = 1.0;
        b[5] = -1.0;
        assert_eq!(weighted_manhattan(&a, &ScenarioDescription::new(b), &[1.0; 9]), 2.0);
        let default = RetrievalConfig::default();
        // Velocity weighs 2, conflict time 3.
        let c = ScenarioDescription::new([0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(weighted_manhattan(&a, &c, &default.weights), 4.0);
    }

    #[test]
    fn filter_threshold_is_strict() {
        let mut store = MemoryStore::new();
        let mut far = [0.0; 9];
        far[0] = 4.0;
        store.insert(unit(DrivingStyle::General, [0.0; 9], "a", MetaAction::Maintain, 0));
        store.insert(unit(DrivingStyle::General, far, "b", MetaAction::Maintain, 1));
        let f = scenario_filter(store.block(DrivingStyle::General), &ScenarioDescription::default(), &RetrievalConfig::default());
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].1, 0.0);
    }

    #[test]
    fn embedding_matches_oracle() {
        let fields = ["yield", "conservative", "I will be slower", "I will be Faster"];
        let v = HashingEmbedder.embed_fields(fields);
        let o = oracle_embed(fields);
        for (a, b) in v.0.iter().zip(&o) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert!((cosine(&v.0, &v.0) - 1.0).abs() < 1e-12);
        let other = ["rush", "aggressive", "", "Maintaining"];
        let expected = cosine(&o, &oracle_embed(other));
        let got = cosine(&v.0, &HashingEmbedder.embed_fields(other).0);
        assert!((expected - got).abs() < 1e-12);
        assert!(HashingEmbedder.embed_fields(["", "", "", ""]).is_zero());
        assert_eq!(cosine(&Embedding::zero().0, &v.0), 0.0);
    }

    #[test]
    fn selection_rules() {
        let near = unit(DrivingStyle::General, [0.0; 9], "I will be Faster", MetaAction::Accelerate, 5);
        let far = unit(DrivingStyle::General, [0.0; 9], "I will be Faster", MetaAction::Decelerate, 1);
        let odd = unit(DrivingStyle::General, [0.0; 9], "completely different", MetaAction::Maintain, 0);
        let query = near.experience.clone();
        let picked = select_by_experience(&[(&odd, 0.0), (&far, 2.0), (&near, 1.0)], &query).unwrap();
        assert_eq!(picked.action, MetaAction::Accelerate);
        // Equal distance: smaller key wins.
        let picked = select_by_experience(&[(&near, 1.0), (&far, 1.0)], &query).unwrap();
        assert_eq!(picked.episode_id, 1);
        assert!(matches!(select_by_experience(&[], &query), Err(MemoryError::EmptyCandidates)));
    }

    #[test]
    fn fallbacks() {
        let cfg = RetrievalConfig::default();
        let s = ScenarioDescription::default();
        let e = ExperienceDescription {
            intention: Intention::Rush,
            style: DrivingStyle::Aggressive,
            instruction: String::new(),
            ehmi: "I will be Slower".into(),
        };
        let empty = MemoryStore::new();
        let r = retrieve(&empty, DrivingStyle::Aggressive, &s, &e, &cfg);
        assert_eq!((r.action, r.provenance.to_string()), (MetaAction::Maintain, "default".to_string()));

        let mut store = MemoryStore::new();
        store.insert(unit(DrivingStyle::General, [0.0; 9], "I will be Slower", MetaAction::Decelerate, 3));
        let r = retrieve(&store, DrivingStyle::Aggressive, &s, &e, &cfg);
        assert_eq!(r.action, MetaAction::Decelerate);
        assert_eq!(r.provenance.to_string(), "general:3:0");

        // A unit at distance 10 is only reachable after two widenings (4 → 8 → 16).
        let mut far = [0.0; 9];
        far[0] = 10.0;
        let mut store = MemoryStore::new();
        store.insert(unit(DrivingStyle::Aggressive, far, "x", MetaAction::Accelerate, 0));
        let r = retrieve(&store, DrivingStyle::Aggressive, &s, &e, &cfg);
        match r.provenance {
            Provenance::Unit { widenings, .. } => assert_eq!(widenings, 2),
            Provenance::Default => panic!("expected a unit"),
        }
        far[0] = 16.0;
        let mut store = MemoryStore::new();
        store.insert(unit(DrivingStyle::Aggressive, far, "x", MetaAction::Accelerate, 0));
        assert!(retrieve(&store, DrivingStyle::Aggressive, &s, &e, &cfg).provenance.is_default());
    }

    fn random_store(rng: &mut ChaCha8Rng, n: usize, styles: &[DrivingStyle]) -> MemoryStore {
        let texts = ["I will be Faster", "I will be Slower", "Maintaining", "go ahead", ""];
        let mut store = MemoryStore::new();
        for k in 0..n {
            let mut s = [0.0; 9];
            for v in &mut s {
                *v = rng.gen_range(-3.0..3.0);
            }
            s[8] = rng.gen_range(0.0..10.0);
            let style = styles[rng.gen_range(0..styles.len())];
            let mut m = unit(style, s, texts[rng.gen_range(0..texts.len())], MetaAction::ALL[k % 3], k as u64);
            m.experience.instruction = texts[rng.gen_range(0..texts.len())].to_string();
            store.insert(m);
        }
        store
    }

    #[test]
    fn pooled_equals_partitioned_on_general_only_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = random_store(&mut rng, 300, &[DrivingStyle::General]);
        let cfg = RetrievalConfig::default();
        for _ in 0..50 {
            let s_c = store.units().nth(rng.gen_range(0..300)).unwrap().scenario;
            let q = store.embed(["yield", "general", "", "Maintaining"]);
            let a = retrieve_embedded(&store, RetrievalMode::PARTITIONED, DrivingStyle::General, &s_c, &q, &cfg);
            let b = retrieve_embedded(&store, RetrievalMode::POOLED, DrivingStyle::General, &s_c, &q, &cfg);
            assert_eq!(a.action, b.action);
            assert_eq!(a.provenance, b.provenance);
        }
    }

    #[test]
    fn partitioned_scans_fewer_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = random_store(&mut rng, 900, &DrivingStyle::ALL);
        let s_c = ScenarioDescription::default();
        let q = store.embed(["rush", "aggressive", "", ""]);
        let cfg = RetrievalConfig::default();
        let part = retrieve_embedded(&store, RetrievalMode::PARTITIONED, DrivingStyle::General, &s_c, &q, &cfg);
        let pool = retrieve_embedded(&store, RetrievalMode::POOLED, DrivingStyle::General, &s_c, &q, &cfg);
        assert!(part.scanned < pool.scanned);
        assert_eq!(pool.scanned, 900);
    }

    #[test]
    fn single_stage_picks_identical_unit() {
        let mut store = MemoryStore::new();
        store.insert(unit(DrivingStyle::General, [1.0; 9], "I will be Faster", MetaAction::Accelerate, 0));
        store.insert(unit(DrivingStyle::General, [-1.0; 9], "I will be Slower", MetaAction::Decelerate, 1));
        let target = &store.block(DrivingStyle::General).units()[1];
        let q = store.embed(target.experience.fields());
        let r = retrieve_embedded(
            &store,
            RetrievalMode::SINGLE_STAGE,
            DrivingStyle::Aggressive,
            &target.scenario,
            &q,
            &RetrievalConfig::default(),
        );
        assert_eq!(r.action, MetaAction::Decelerate);
    }

    #[test]
    fn curation_rules() {
        let frames: Vec<MemoryUnit> = (0..80)
            .map(|t| MemoryUnit {
                frame_index: t,
                ..unit(DrivingStyle::General, [0.0; 9], "", MetaAction::Maintain, 0)
            })
            .collect();
        let safe: Vec<(u64, f64)> = (0..80).map(|t| (t, 3.0)).collect();
        assert!(curate_episode(frames.clone(), EpisodeOutcome::Collision, &safe).is_empty());
        assert!(curate_episode(frames.clone(), EpisodeOutcome::Deadlock, &safe).is_empty());
        assert_eq!(curate_episode(frames.clone(), EpisodeOutcome::Success, &safe).len(), 80);
        let mut risky = safe.clone();
        risky[30].1 = 0.2;
        let kept = curate_episode(frames, EpisodeOutcome::Success, &risky);
        assert_eq!(kept.len(), 69);
        assert!(kept.iter().all(|m| !(20..=30).contains(&m.frame_index)));
        assert!(kept.windows(2).all(|w| w[0].frame_index < w[1].frame_index));
    }

    #[test]
    fn persistence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.jsonl");
        let empty = MemoryStore::new();
        save_store(&empty, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert_eq!(load_store(&path).unwrap(), empty);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = random_store(&mut rng, 1000, &DrivingStyle::ALL);
        save_store(&store, &path).unwrap();
        let loaded = load_store(&path).unwrap();
        assert_eq!(loaded, store);
        let text = fs::read_to_string(&path).unwrap();
        let styles: Vec<_> = text.lines().map(|l| record_to_memory(l).unwrap().style().index()).collect();
        assert!(styles.windows(2).all(|w| w[0] <= w[1]), "blocks in style order");

        let mut lines: Vec<&str> = text.lines().collect();
        lines[4] = "{\"episode\": 1, \"frame\":";
        fs::write(&path, lines.join("\n")).unwrap();
        match load_store(&path) {
            Err(MemoryError::Line { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected a line error, got {other:?}"),
        }
    }

    fn arb_scenario() -> impl Strategy<Value = ScenarioDescription> {
        prop::array::uniform9(-20.0f64..20.0).prop_map(ScenarioDescription::new)
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in arb_scenario(), b in arb_scenario(), c in arb_scenario(),
            w in prop::array::uniform9(0.0f64..5.0),
        ) {
            prop_assert_eq!(weighted_manhattan(&a, &a, &w), 0.0);
            prop_assert_eq!(weighted_manhattan(&a, &b, &w), weighted_manhattan(&b, &a, &w));
            let lhs = weighted_manhattan(&a, &c, &w);
            let rhs = weighted_manhattan(&a, &b, &w) + weighted_manhattan(&b, &c, &w);
            prop_assert!(lhs <= rhs + 1e-9);
        }

        #[test]
        fn filter_is_monotone_in_epsilon(seed in any::<u64>(), e1 in 0.1f64..10.0, extra in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = random_store(&mut rng, 60, &[DrivingStyle::General]);
            let block = store.block(DrivingStyle::General);
            let s_c = block.units()[0].scenario;
            let small = RetrievalConfig { epsilon: e1, ..Default::default() };
            let large = RetrievalConfig { epsilon: e1 + extra, ..Default::default() };
            let f1: Vec<u64> = scenario_filter(block, &s_c, &small).iter().map(|(m, _)| m.episode_id).collect();
            let f2: Vec<u64> = scenario_filter(block, &s_c, &large).iter().map(|(m, _)| m.episode_id).collect();
            prop_assert!(f1.iter().all(|k| f2.contains(k)));
        }

        #[test]
        fn cosine_of_embeddings_in_unit_interval(a in ".{0,40}", b in ".{0,40}") {
            let x = HashingEmbedder.embed_fields([&a, "", "", ""]);
            let y = HashingEmbedder.embed_fields([&b, "", "", ""]);
            let c = cosine(&x.0, &y.0);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
            prop_assert!(x.is_zero() || (x.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn inserts_partition(units in prop::collection::vec(crate::model::tests::arb_unit(), 0..60)) {
            let mut store = MemoryStore::new();
            store.extend(units.iter().cloned());
            prop_assert_eq!(store.len(), units.len());
            for b in store.blocks() {
                prop_assert!(b.units().iter().all(|m| m.style() == b.style));
            }
        }
    }
}
