//! Two-tier relevance serving: an immutable snapshot of batch-scored
//! query-item pairs, consulted before a live online scorer.
//!
//! Snapshot file layout:
//!
//! ```text
//! "FGSNAP01" | u32 LE header length | JSON header
//!            | entry_count × (16-byte pair key, f64 LE score), sorted by key
//!            | sha256 of the record section (32 bytes)
//! ```

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{normalize_text, Catalog, ClickRecord};
use crate::error::{Error, Result};
use crate::mlm::TrainableMlm;
use crate::pet::{relevance_score, BoundPrompt};
use crate::vocab::Vocab;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"FGSNAP01";
pub const SNAPSHOT_FORMAT: u32 = 1;
pub const DIGEST_ALGO: &str = "sha256-128";
const RECORD_LEN: usize = 24;

pub type PairKey = [u8; 16];

/// First 16 bytes of sha256(normalized query, 0x1F, item id).
pub fn pair_key(query: &str, item_id: &str) -> PairKey {
    let mut h = Sha256::new();
    h.update(normalize_text(query).as_bytes());
    h.update([0x1F]);
    h.update(item_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    key
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub digest_algo: String,
    pub version: String,
    pub model_checkpoint_digest: String,
    pub entry_count: u64,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotMeta {
    pub version: String,
    pub model_checkpoint_digest: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    header: SnapshotHeader,
    entries: Vec<(PairKey, f64)>,
}

impl Snapshot {
    /// Sorts and deduplicates `entries` by key (first occurrence wins).
    pub fn new(meta: SnapshotMeta, entries: impl IntoIterator<Item = (PairKey, f64)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (k, v) in entries {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("snapshot score {v} outside [0, 1]")));
            }
            seen.entry(k).or_insert(v);
        }
        let entries: Vec<(PairKey, f64)> = seen.into_iter().collect();
        Ok(Self {
            header: SnapshotHeader {
                format_version: SNAPSHOT_FORMAT,
                digest_algo: DIGEST_ALGO.into(),
                version: meta.version,
                model_checkpoint_digest: meta.model_checkpoint_digest,
                entry_count: entries.len() as u64,
                created_at: meta.created_at,
            },
            entries,
        })
    }

    pub fn empty(version: impl Into<String>) -> Self {
        Self::new(
            SnapshotMeta {
                version: version.into(),
                model_checkpoint_digest: String::new(),
                created_at: String::new(),
            },
            [],
        )
        .expect("empty snapshot is valid")
    }

    pub fn header(&self) -> &SnapshotHeader {
        &self.header
    }

    pub fn version(&self) -> &str {
        &self.header.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(PairKey, f64)] {
        &self.entries
    }

    pub fn get_key(&self, key: &PairKey) -> Option<f64> {
        self.entries
            .binary_search_by(|(k, _)| k.cmp(key))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn get(&self, query: &str, item_id: &str) -> Option<f64> {
        self.get_key(&pair_key(query, item_id))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + self.entries.len() * RECORD_LEN + 32);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let records_start = out.len();
        for (k, v) in &self.entries {
            out.extend_from_slice(k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = Sha256::digest(&out[records_start..]);
        out.extend_from_slice(&checksum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptSnapshot(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: SnapshotHeader =
            serde_json::from_slice(body).map_err(|e| Error::CorruptSnapshot(format!("header: {e}")))?;
        if header.format_version != SNAPSHOT_FORMAT {
            return Err(Error::CorruptSnapshot(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.digest_algo != DIGEST_ALGO {
            return Err(Error::CorruptSnapshot(format!("unknown digest {}", header.digest_algo)));
        }
        let records = &bytes[12 + hlen..];
        let n = header.entry_count as usize;
        if records.len() != n * RECORD_LEN + 32 {
            return Err(corrupt("record section length does not match entry_count"));
        }
        let (records, checksum) = records.split_at(n * RECORD_LEN);
        if Sha256::digest(records).as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut entries = Vec::with_capacity(n);
        for rec in records.chunks_exact(RECORD_LEN) {
            let key: PairKey = rec[..16].try_into().expect("16 bytes");
            let score = f64::from_le_bytes(rec[16..].try_into().expect("8 bytes"));
            if !(0.0..=1.0).contains(&score) {
                return Err(corrupt("score outside [0, 1]"));
            }
            if entries.last().is_some_and(|(k, _): &(PairKey, f64)| *k >= key) {
                return Err(corrupt("records not strictly sorted"));
            }
            entries.push((key, score));
        }
        Ok(Self { header, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchScoreStats {
    pub requested: usize,
    pub duplicates: usize,
    pub unresolved: usize,
}

/// Scores every unique resolvable pair with `relevance_score`.
pub fn batch_score(
    model: &TrainableMlm,
    prompt: &BoundPrompt,
    vocab: &Vocab,
    catalog: &Catalog,
    pairs: &[(String, String)],
    meta: SnapshotMeta,
) -> Result<(Snapshot, BatchScoreStats)> {
    let mut stats = BatchScoreStats {
        requested: pairs.len(),
        ..Default::default()
    };
    let mut seen = std::collections::HashSet::new();
    let mut unique = Vec::new();
    for (q, item_id) in pairs {
        let key = pair_key(q, item_id);
        if !seen.insert(key) {
            stats.duplicates += 1;
            continue;
        }
        match catalog.get(item_id) {
            Some(item) => unique.push((key, q.as_str(), item)),
            None => stats.unresolved += 1,
        }
    }
    let scored: Vec<(PairKey, f64)> = unique
        .par_iter()
        .map(|&(key, q, item)| Ok((key, relevance_score(model, prompt, vocab, q, item)?.score)))
        .collect::<Result<_>>()?;
    Ok((Snapshot::new(meta, scored)?, stats))
}

/// The `k` most-clicked (query, item) pairs; ties by query, then item.
pub fn top_pairs_by_clicks(clicks: &[ClickRecord], k: usize) -> Vec<(String, String)> {
    let mut totals: HashMap<(&str, &str), u64> = HashMap::new();
    for c in clicks {
        *totals.entry((c.query.as_str(), c.item_id.as_str())).or_default() += c.clicks;
    }
    let mut ranked: Vec<((&str, &str), u64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|((q, i), _)| (q.to_string(), i.to_string()))
        .collect()
}

pub trait OnlineScorer: Send + Sync {
    fn score(&self, query: &str, item_id: &str) -> std::result::Result<f64, ScoreError>;
}

/// The live model tier.
pub struct ModelScorer {
    pub model: TrainableMlm,
    pub prompt: BoundPrompt,
    pub vocab: Vocab,
    pub catalog: Catalog,
}

impl OnlineScorer for ModelScorer {
    fn score(&self, query: &str, item_id: &str) -> std::result::Result<f64, ScoreError> {
        let item = self.catalog.get(item_id).ok_or_else(|| ScoreError {
            code: "unknown_item".into(),
            message: format!("item {item_id} is not in the catalog"),
        })?;
        relevance_score(&self.model, &self.prompt, &self.vocab, query, item)
            .map(|r| r.score)
            .map_err(|e| ScoreError {
                code: "model_error".into(),
                message: e.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Cache,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResult {
    pub score: f64,
    pub tier: Tier,
    pub snapshot_version: Option<String>,
}

impl ScoredResult {
    pub fn relevant(&self) -> bool {
        self.score >= 0.5
    }
}

/// A failed online lookup; always attributed to the online tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ScoreError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapAck {
    pub previous: String,
    pub current: String,
    pub entry_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub hits: u64,
    pub misses: u64,
    pub errors: u64,
    pub hit_rate: Option<f64>,
    pub p50_latency_us: Option<u64>,
    pub p99_latency_us: Option<u64>,
    pub snapshot: String,
}

const LATENCY_WINDOW: usize = 10_000;

pub struct RelevanceService {
    snapshot: ArcSwap<Snapshot>,
    online: Box<dyn OnlineScorer>,
    swap_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    errors: AtomicU64,
    latencies: Mutex<VecDeque<u64>>,
}

impl RelevanceService {
    pub fn new(snapshot: Snapshot, online: Box<dyn OnlineScorer>) -> Self {
        Self {
            snapshot: ArcSwap::from_pointee(snapshot),
            online,
            swap_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            errors: AtomicU64::new(0),
            latencies: Mutex::new(VecDeque::with_capacity(LATENCY_WINDOW)),
        }
    }

    /// The live snapshot; holding the `Arc` keeps it alive across swaps.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.load_full()
    }

    pub fn score_with_fallback(
        &self,
        query: &str,
        item_id: &str,
    ) -> std::result::Result<ScoredResult, ScoreError> {
        let started = Instant::now();
        let snap = self.snapshot.load();
        let result = match snap.get(query, item_id) {
            Some(score) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(ScoredResult {
                    score,
                    tier: Tier::Cache,
                    snapshot_version: Some(snap.version().to_string()),
                })
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                match self.online.score(query, item_id) {
                    Ok(score) => Ok(ScoredResult {
                        score,
                        tier: Tier::Online,
                        snapshot_version: None,
                    }),
                    Err(e) => {
                        self.errors.fetch_add(1, Ordering::Relaxed);
                        Err(e)
                    }
                }
            }
        };
        self.record_latency(started.elapsed());
        result
    }

    fn record_latency(&self, d: Duration) {
        let mut window = self.latencies.lock().expect("latency window");
        if window.len() == LATENCY_WINDOW {
            window.pop_front();
        }
        window.push_back(d.as_micros() as u64);
    }

    pub fn swap_snapshot(&self, snapshot: Snapshot) -> SwapAck {
        let _guard = self.swap_lock.lock().expect("swap lock");
        let current = snapshot.version().to_string();
        let entry_count = snapshot.header().entry_count;
        let previous = self.snapshot.swap(Arc::new(snapshot));
        SwapAck {
            previous: previous.version().to_string(),
            current,
            entry_count,
        }
    }

    /// Loads and validates `path` before swapping; on error the live
    /// snapshot is untouched.
    pub fn swap_from_path(&self, path: &Path) -> Result<SwapAck> {
        let snapshot = Snapshot::read(path)?;
        Ok(self.swap_snapshot(snapshot))
    }

    pub fn hit_rate(&self) -> Result<f64> {
        let hits = self.hits.load(Ordering::Relaxed);
        let misses = self.misses.load(Ordering::Relaxed);
        if hits + misses == 0 {
            return Err(Error::Empty("hit rate needs at least one lookup"));
        }
        Ok(hits as f64 / (hits + misses) as f64)
    }

    pub fn reset_counters(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
        self.errors.store(0, Ordering::Relaxed);
        self.latencies.lock().expect("latency window").clear();
    }

    pub fn metrics(&self) -> ServiceMetrics {
        let mut lat: Vec<u64> = self.latencies.lock().expect("latency window").iter().copied().collect();
        lat.sort_unstable();
        let pct = |p: f64| -> Option<u64> {
            (!lat.is_empty()).then(|| lat[((lat.len() - 1) as f64 * p).round() as usize])
        };
        ServiceMetrics {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
            hit_rate: self.hit_rate().ok(),
            p50_latency_us: pct(0.5),
            p99_latency_us: pct(0.99),
            snapshot: self.snapshot.load().version().to_string(),
        }
    }
}
