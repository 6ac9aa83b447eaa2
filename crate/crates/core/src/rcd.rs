//! Reading-comprehension distillation: a teacher model reads each item
//! through three prompts (summary and background, query generation, query
//! reasons) and its answers become plain-text pretraining documents.
//!
//! The teacher is anything implementing [`TeacherClient`]. [`MockTeacher`]
//! is deterministic and needs no network; [`HttpTeacher`] speaks the
//! `{"prompt": ..}` → `{"text": ..}` wire contract.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::corpus::{normalize_text, Catalog, ItemDoc};
use crate::embed::{cosine_sim, TextEncoder};
use crate::error::{Error, Result};
use crate::io::sha256_hex;

const ITEM_SLOTS: [&str; 4] = ["title", "keywords", "category", "description"];
const DEFERRED_SLOTS: [&str; 2] = ["n", "queries"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcdPromptSet {
    pub prompt1: String,
    pub prompt2: String,
    pub prompt3: String,
}

const ITEM_BLOCK: &str =
    "Title: {title}\nKeywords: {keywords}\nCategory: {category}\nDescription: {description}";

impl Default for RcdPromptSet {
    fn default() -> Self {
        Self {
            prompt1: format!(
                "Summarize and rephrase this service; then give background knowledge about it.\n{ITEM_BLOCK}\nAnswer with a line starting 'Summary:' and a line starting 'Background:'."
            ),
            prompt2: format!(
                "Generate {{n}} diverse search queries a user might issue to find this service.\n{ITEM_BLOCK}\nAnswer with one line starting 'Query:' per query."
            ),
            prompt3: format!(
                "For each query, explain why it matches this service.\n{ITEM_BLOCK}\nQueries:\n{{queries}}\nAnswer with one line starting 'Reason:' per query, in order."
            ),
        }
    }
}

fn slot_names(template: &str) -> Vec<&str> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        match rest[open + 1..].find('}') {
            Some(close) => {
                names.push(&rest[open + 1..open + 1 + close]);
                rest = &rest[open + 1 + close + 1..];
            }
            None => break,
        }
    }
    names
}

impl RcdPromptSet {
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.templates().iter().enumerate() {
            if t.trim().is_empty() {
                return Err(Error::Config(format!("prompt{} is empty", i + 1)));
            }
            for name in slot_names(t) {
                if !ITEM_SLOTS.contains(&name) && !DEFERRED_SLOTS.contains(&name) {
                    return Err(Error::Config(format!(
                        "prompt{} has unknown slot {{{name}}}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> [&str; 3] {
        [&self.prompt1, &self.prompt2, &self.prompt3]
    }

    pub fn digest(&self, n_queries: usize) -> String {
        let joined = format!(
            "{}\u{0}{}\u{0}{}\u{0}{n_queries}",
            self.prompt1, self.prompt2, self.prompt3
        );
        sha256_hex(joined.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompts {
    pub prompts: [String; 3],
    /// Optional item fields that were absent and rendered as "".
    pub missing_fields: Vec<&'static str>,
}

/// Substitutes the item slots of all three prompts. `{n}` and `{queries}`
/// stay in place; they are filled during generation.
pub fn render_rcd_prompts(item: &ItemDoc, prompts: &RcdPromptSet) -> Result<RenderedPrompts> {
    let title = item
        .title()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::invalid(format!("item {} has no title", item.item_id)))?;
    let mut missing_fields = Vec::new();
    let mut values = Vec::with_capacity(ITEM_SLOTS.len());
    for slot in ITEM_SLOTS {
        let value = if slot == "title" {
            title
        } else {
            match item.field(slot) {
                Some(v) => v,
                None => {
                    missing_fields.push(slot);
                    ""
                }
            }
        };
        values.push((slot, value));
    }
    let render = |template: &str| {
        let mut out = template.to_string();
        for (slot, value) in &values {
            out = out.replace(&format!("{{{slot}}}"), value);
        }
        out
    };
    Ok(RenderedPrompts {
        prompts: prompts.templates().map(render),
        missing_fields,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TeacherError {
    /// Timeouts and server-side failures; worth retrying.
    #[error("transient teacher failure: {0}")]
    Transient(String),
    #[error("teacher failure: {0}")]
    Permanent(String),
}

pub trait TeacherClient: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TeacherError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherClientConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for TeacherClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "mock".into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Serialize)]
struct TeacherRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TeacherResponse {
    text: String,
}

pub struct HttpTeacher {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTeacher {
    pub fn new(cfg: &TeacherClientConfig) -> Result<Self> {
        if cfg.timeout.is_zero() {
            return Err(Error::Config("teacher timeout must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: cfg.endpoint.clone(),
            client,
        })
    }
}

impl TeacherClient for HttpTeacher {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TeacherError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&TeacherRequest { prompt })
            .send()
            .map_err(|e| {
                if e.is_timeout() || e.is_connect() || e.is_request() {
                    TeacherError::Transient(e.to_string())
                } else {
                    TeacherError::Permanent(e.to_string())
                }
            })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(TeacherError::Transient(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(TeacherError::Permanent(format!("status {status}")));
        }
        resp.json::<TeacherResponse>()
            .map(|r| r.text)
            .map_err(|e| TeacherError::Permanent(format!("bad response body: {e}")))
    }
}

/// Template-based teacher. Answers are a pure function of (seed, prompt);
/// injected failures are a pure function of (seed, prompt, attempt).
#[derive(Debug, Default)]
pub struct MockTeacher {
    pub seed: u64,
    /// Probability that any single call fails transiently.
    pub failure_rate: f64,
    /// Probability that a prompt's answer is permanently unparseable.
    pub malformed_rate: f64,
    attempts: Mutex<HashMap<u64, u32>>,
    calls: AtomicUsize,
}

fn unit_draw(seed: u64, key: &str, salt: u64) -> f64 {
    let h = xxh3_64_with_seed(key.as_bytes(), seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl MockTeacher {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    pub fn with_failures(seed: u64, failure_rate: f64, malformed_rate: f64) -> Self {
        Self {
            seed,
            failure_rate,
            malformed_rate,
            ..Default::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Whether the `attempt`-th call (0-based) for `prompt` fails transiently.
    pub fn fails_on(&self, prompt: &str, attempt: u32) -> bool {
        self.failure_rate > 0.0 && unit_draw(self.seed, prompt, 1 + attempt as u64) < self.failure_rate
    }

    pub fn is_malformed(&self, prompt: &str) -> bool {
        self.malformed_rate > 0.0 && unit_draw(self.seed, prompt, 0xBAD) < self.malformed_rate
    }

    fn answer(&self, prompt: &str) -> String {
        let fields = mock_fields(prompt);
        let get = |k: &str| fields.get(k).map(String::as_str).unwrap_or("");
        let title = get("title");
        let category = get("category");
        let keywords: Vec<&str> = get("keywords")
            .split([',', '，'])
            .map(str::trim)
            .filter(|k| !k.is_empty())
            .collect();
        if prompt.contains("'Reason:'") {
            let queries = mock_query_list(prompt);
            return queries
                .iter()
                .map(|q| {
                    let anchor = keywords.first().copied().unwrap_or(category);
                    format!("Reason: {q} asks for {title} {anchor}")
                })
                .collect::<Vec<_>>()
                .join("\n");
        }
        if prompt.contains("'Query:'") {
            let n = prompt
                .split_whitespace()
                .nth(1)
                .and_then(|w| w.parse::<usize>().ok())
                .unwrap_or(3);
            let mut rng = ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(prompt.as_bytes(), self.seed));
            let mut pool: Vec<String> = keywords.iter().map(|k| format!("{title} {k}")).collect();
            pool.extend(keywords.iter().map(|k| k.to_string()));
            if !category.is_empty() {
                pool.push(format!("{category} {title}"));
            }
            pool.push(title.to_string());
            pool.dedup();
            pool.shuffle(&mut rng);
            pool.truncate(n.max(1));
            return pool
                .iter()
                .map(|q| format!("Query: {q}"))
                .collect::<Vec<_>>()
                .join("\n");
        }
        let description = get("description");
        let kw = keywords.join(" ");
        let background = if description.is_empty() {
            format!("{title} belongs to {category}")
        } else {
            description.to_string()
        };
        format!("Summary: {title} {category} service offers {kw}\nBackground: {background}")
    }
}

fn mock_fields(prompt: &str) -> HashMap<String, String> {
    prompt
        .lines()
        .filter_map(|line| line.split_once(": "))
        .map(|(k, v)| (k.trim().to_lowercase(), v.trim().to_string()))
        .filter(|(k, _)| ITEM_SLOTS.contains(&k.as_str()))
        .collect()
}

fn mock_query_list(prompt: &str) -> Vec<String> {
    let mut lines = prompt.lines().skip_while(|l| l.trim() != "Queries:").skip(1);
    let mut out = Vec::new();
    for line in lines.by_ref() {
        match line.strip_prefix("- ") {
            Some(q) => out.push(q.trim().to_string()),
            None => break,
        }
    }
    out
}

impl TeacherClient for MockTeacher {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TeacherError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = xxh3_64_with_seed(prompt.as_bytes(), 0);
        let attempt = {
            let mut attempts = self.attempts.lock().expect("mock attempt table");
            let slot = attempts.entry(key).or_insert(0);
            let a = *slot;
            *slot += 1;
            a
        };
        if self.fails_on(prompt, attempt) {
            return Err(TeacherError::Transient("injected 503".into()));
        }
        if self.is_malformed(prompt) {
            return Ok("<<garbled>>".into());
        }
        Ok(self.answer(prompt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcdOutput {
    pub item_id: String,
    pub summary: String,
    pub background: String,
    pub queries: Vec<GeneratedQuery>,
}

/// Splits a labeled-section answer into (label, value) pairs. Labels are
/// lowercased with list markers and trailing numbers removed; unlabeled
/// lines continue the previous section.
pub fn parse_sections(text: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for raw in text.lines() {
        let line = raw
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim_start();
        let line = line
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .trim_start_matches(['.', ')'])
            .trim_start();
        if line.is_empty() {
            continue;
        }
        let labeled = line.split_once(':').and_then(|(label, value)| {
            let label = label
                .trim()
                .trim_end_matches(|c: char| c.is_ascii_digit())
                .trim()
                .to_lowercase();
            (!label.is_empty() && label.chars().all(|c| c.is_alphabetic() || c == ' '))
                .then(|| (label, value.trim().to_string()))
        });
        match labeled {
            Some(pair) => out.push(pair),
            None => match out.last_mut() {
                Some((_, value)) => {
                    value.push(' ');
                    value.push_str(line);
                }
                None => out.push((String::new(), line.to_string())),
            },
        }
    }
    out
}

fn section_values(sections: &[(String, String)], label: &str) -> Vec<String> {
    sections
        .iter()
        .filter(|(l, _)| l == label)
        .map(|(_, v)| v.clone())
        .collect()
}

/// Assembles an output from the three raw answers.
pub fn parse_responses(item_id: &str, responses: &[String; 3]) -> std::result::Result<RcdOutput, String> {
    let s1 = parse_sections(&responses[0]);
    let summary = section_values(&s1, "summary").join(" ");
    if summary.trim().is_empty() {
        return Err("no Summary section in answer 1".into());
    }
    let background = section_values(&s1, "background").join(" ");
    let queries = section_values(&parse_sections(&responses[1]), "query");
    if queries.is_empty() {
        return Err("no Query lines in answer 2".into());
    }
    let reasons = section_values(&parse_sections(&responses[2]), "reason");
    Ok(RcdOutput {
        item_id: item_id.to_string(),
        summary: normalize_text(&summary),
        background: normalize_text(&background),
        queries: queries
            .into_iter()
            .enumerate()
            .map(|(i, q)| GeneratedQuery {
                text: normalize_text(&q),
                reason: normalize_text(reasons.get(i).map(String::as_str).unwrap_or("")),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcdFailureReason {
    MissingTitle,
    RetriesExhausted,
    TeacherError,
    UnparseableResponse,
    SummaryTooShort,
    NoValidQueries,
}

impl RcdFailureReason {
    pub fn code(self) -> &'static str {
        match self {
            RcdFailureReason::MissingTitle => "missing_title",
            RcdFailureReason::RetriesExhausted => "retries_exhausted",
            RcdFailureReason::TeacherError => "teacher_error",
            RcdFailureReason::UnparseableResponse => "unparseable_response",
            RcdFailureReason::SummaryTooShort => "summary_too_short",
            RcdFailureReason::NoValidQueries => "no_valid_queries",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcdFailure {
    pub item_id: String,
    pub reason: RcdFailureReason,
    pub detail: String,
}

/// Raw teacher answers persisted per (item, prompt set).
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CachedResponses {
    item_id: String,
    responses: [String; 3],
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn path(&self, item_id: &str, prompts_digest: &str) -> PathBuf {
        let key = sha256_hex(format!("{item_id}\u{0}{prompts_digest}").as_bytes());
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, item_id: &str, prompts_digest: &str) -> Option<[String; 3]> {
        let bytes = std::fs::read(self.path(item_id, prompts_digest)).ok()?;
        let cached: CachedResponses = serde_json::from_slice(&bytes).ok()?;
        (cached.item_id == item_id).then_some(cached.responses)
    }

    pub fn put(&self, item_id: &str, prompts_digest: &str, responses: &[String; 3]) -> Result<()> {
        let body = serde_json::to_vec(&CachedResponses {
            item_id: item_id.to_string(),
            responses: responses.clone(),
        })?;
        crate::io::write_atomic(&self.path(item_id, prompts_digest), &body)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcdConfig {
    pub n_queries: usize,
    pub sigma_rcd: f64,
    pub max_query_chars: usize,
    pub max_queries: usize,
    pub min_summary_chars: usize,
    pub parallelism: usize,
    pub client: TeacherClientConfig,
}

impl Default for RcdConfig {
    fn default() -> Self {
        Self {
            n_queries: 3,
            sigma_rcd: 0.2,
            max_query_chars: 64,
            max_queries: 20,
            min_summary_chars: 10,
            parallelism: 4,
            client: TeacherClientConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub output: RcdOutput,
    /// Teacher calls made, retries included; 0 on a cache hit.
    pub attempts: u32,
    pub cached: bool,
}

fn call_with_retry(
    client: &dyn TeacherClient,
    prompt: &str,
    cfg: &TeacherClientConfig,
    attempts: &mut u32,
) -> std::result::Result<String, (RcdFailureReason, String)> {
    let mut last = String::new();
    for attempt in 0..=cfg.max_retries {
        *attempts += 1;
        match client.complete(prompt) {
            Ok(text) => return Ok(text),
            Err(TeacherError::Transient(msg)) => {
                last = msg;
                if attempt < cfg.max_retries && !cfg.backoff.is_zero() {
                    std::thread::sleep(cfg.backoff * 2u32.saturating_pow(attempt));
                }
            }
            Err(TeacherError::Permanent(msg)) => return Err((RcdFailureReason::TeacherError, msg)),
        }
    }
    Err((
        RcdFailureReason::RetriesExhausted,
        format!("{} attempts: {last}", cfg.max_retries + 1),
    ))
}

/// Runs the three prompts for one item, consulting `cache` first.
pub fn generate(
    client: &dyn TeacherClient,
    item: &ItemDoc,
    prompts: &RcdPromptSet,
    cfg: &RcdConfig,
    cache: Option<&ResponseCache>,
) -> std::result::Result<Generated, RcdFailure> {
    let fail = |reason, detail: String| RcdFailure {
        item_id: item.item_id.clone(),
        reason,
        detail,
    };
    let digest = prompts.digest(cfg.n_queries);
    let parse = |responses: &[String; 3]| {
        parse_responses(&item.item_id, responses).map_err(|e| {
            let raw = responses.join("\n---\n");
            fail(RcdFailureReason::UnparseableResponse, format!("{e}; raw: {raw}"))
        })
    };
    if let Some(responses) = cache.and_then(|c| c.get(&item.item_id, &digest)) {
        return Ok(Generated {
            output: parse(&responses)?,
            attempts: 0,
            cached: true,
        });
    }
    let rendered = render_rcd_prompts(item, prompts)
        .map_err(|e| fail(RcdFailureReason::MissingTitle, e.to_string()))?;
    let n = cfg.n_queries.to_string();
    let mut attempts = 0;
    let mut call = |prompt: String| {
        call_with_retry(client, &prompt, &cfg.client, &mut attempts).map_err(|(r, d)| fail(r, d))
    };
    let r1 = call(rendered.prompts[0].replace("{n}", &n))?;
    let r2 = call(rendered.prompts[1].replace("{n}", &n))?;
    let generated = section_values(&parse_sections(&r2), "query");
    if generated.is_empty() {
        return Err(fail(
            RcdFailureReason::UnparseableResponse,
            format!("no Query lines in answer 2; raw: {r2}"),
        ));
    }
    let listing = generated
        .iter()
        .map(|q| format!("- {}", q.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    let r3 = call(
        rendered.prompts[2]
            .replace("{n}", &n)
            .replace("{queries}", &listing),
    )?;
    let responses = [r1, r2, r3];
    let output = parse(&responses)?;
    if let Some(c) = cache {
        c.put(&item.item_id, &digest, &responses)
            .map_err(|e| fail(RcdFailureReason::TeacherError, format!("cache write: {e}")))?;
    }
    Ok(Generated {
        output,
        attempts,
        cached: false,
    })
}

/// Quality gate: dedup, length cap, similarity to the item's short text,
/// minimum summary length.
pub fn validate_rcd_output(
    out: &RcdOutput,
    item: &ItemDoc,
    cfg: &RcdConfig,
    encoder: &dyn TextEncoder,
) -> std::result::Result<RcdOutput, RcdFailure> {
    let fail = |reason, detail: String| RcdFailure {
        item_id: item.item_id.clone(),
        reason,
        detail,
    };
    if out.summary.chars().count() < cfg.min_summary_chars {
        return Err(fail(
            RcdFailureReason::SummaryTooShort,
            format!("summary has {} characters", out.summary.chars().count()),
        ));
    }
    let item_vec = encoder.embed(&item.short_text());
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for q in &out.queries {
        let text = normalize_text(&q.text);
        if text.is_empty() || text.chars().count() > cfg.max_query_chars || !seen.insert(text.clone()) {
            continue;
        }
        let sim = cosine_sim(&item_vec, &encoder.embed(&text)).unwrap_or(0.0);
        if sim < cfg.sigma_rcd {
            continue;
        }
        kept.push(GeneratedQuery {
            text,
            reason: q.reason.clone(),
        });
        if kept.len() == cfg.max_queries {
            break;
        }
    }
    if kept.is_empty() {
        return Err(fail(
            RcdFailureReason::NoValidQueries,
            format!("all {} generated queries were dropped", out.queries.len()),
        ));
    }
    Ok(RcdOutput {
        queries: kept,
        ..out.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RcdKind {
    Summary,
    Queries,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcdInstance {
    pub item_id: String,
    pub kind: RcdKind,
    pub text: String,
}

/// Labels used in emitted documents; kept here so vocabularies can include them.
pub const DOC_LABELS: &str = "Service: Query: Reason:";

pub fn emit_rcd_examples(out: &RcdOutput, item: &ItemDoc) -> Vec<RcdInstance> {
    let summary = if out.background.is_empty() {
        out.summary.clone()
    } else {
        format!("{}\n{}", out.summary, out.background)
    };
    let mut lines = vec![format!("Service: {}", item.short_text())];
    for q in &out.queries {
        if q.reason.is_empty() {
            lines.push(format!("Query: {}", q.text));
        } else {
            lines.push(format!("Query: {} Reason: {}", q.text, q.reason));
        }
    }
    vec![
        RcdInstance {
            item_id: item.item_id.clone(),
            kind: RcdKind::Summary,
            text: summary,
        },
        RcdInstance {
            item_id: item.item_id.clone(),
            kind: RcdKind::Queries,
            text: lines.join("\n"),
        },
    ]
}

#[derive(Debug, Clone, Default)]
pub struct RcdRun {
    pub instances: Vec<RcdInstance>,
    pub accepted: Vec<String>,
    pub failures: Vec<RcdFailure>,
    pub teacher_attempts: u64,
    pub cache_hits: usize,
}

impl RcdRun {
    pub fn failure_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.failures {
            *counts.entry(f.reason.code()).or_default() += 1;
        }
        counts
    }
}

/// Generates, validates and emits for every item, at most
/// `cfg.parallelism` items in flight. Output follows item id order.
pub fn run_rcd(
    catalog: &Catalog,
    client: &dyn TeacherClient,
    prompts: &RcdPromptSet,
    cfg: &RcdConfig,
    cache: Option<&ResponseCache>,
    encoder: &dyn TextEncoder,
) -> Result<RcdRun> {
    prompts.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let items: Vec<&ItemDoc> = catalog.iter().collect();
    let results: Vec<std::result::Result<(Vec<RcdInstance>, Generated), RcdFailure>> =
        pool.install(|| {
            items
                .par_iter()
                .map(|item| {
                    let generated = generate(client, item, prompts, cfg, cache)?;
                    let valid = validate_rcd_output(&generated.output, item, cfg, encoder)?;
                    Ok((emit_rcd_examples(&valid, item), generated))
                })
                .collect()
        });
    let mut run = RcdRun::default();
    for (item, result) in items.iter().zip(results) {
        match result {
            Ok((instances, generated)) => {
                run.teacher_attempts += generated.attempts as u64;
                run.cache_hits += generated.cached as usize;
                run.accepted.push(item.item_id.clone());
                run.instances.extend(instances);
            }
            Err(failure) => run.failures.push(failure),
        }
    }
    Ok(run)
}

pub fn write_rcd<W: std::io::Write>(mut out: W, instances: &[RcdInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedNgramEncoder;

    fn item() -> ItemDoc {
        ItemDoc::new(
            "h1",
            [
                ("title", "City Hospital"),
                ("keywords", "registration,clinic"),
                ("category", "healthcare"),
                ("description", "Book appointments at City Hospital"),
            ],
        )
        .unwrap()
    }

    struct Scripted {
        failures_left: Mutex<u32>,
        answer: Box<dyn Fn(&str) -> String + Send + Sync>,
        calls: AtomicUsize,
    }

    impl TeacherClient for Scripted {
        fn complete(&self, prompt: &str) -> std::result::Result<String, TeacherError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(TeacherError::Transient("503".into()));
            }
            Ok((self.answer)(prompt))
        }
    }

    fn quick_cfg(max_retries: u32) -> RcdConfig {
        RcdConfig {
            client: TeacherClientConfig {
                max_retries,
                backoff: Duration::ZERO,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn prompts_contain_title() {
        let r = render_rcd_prompts(&item(), &RcdPromptSet::default()).unwrap();
        for p in &r.prompts {
            assert!(p.contains("City Hospital"));
        }
        assert!(r.missing_fields.is_empty());
    }

    #[test]
    fn missing_description_renders_empty() {
        let it = ItemDoc::new("x", [("title", "Bus"), ("keywords", "route")]).unwrap();
        let r = render_rcd_prompts(&it, &RcdPromptSet::default()).unwrap();
        assert!(r.prompts[0].contains("Description: \n"));
        assert_eq!(r.missing_fields, vec!["category", "description"]);
        let untitled = ItemDoc::new("y", [("keywords", "k")]).unwrap();
        assert!(render_rcd_prompts(&untitled, &RcdPromptSet::default()).is_err());
    }

    #[test]
    fn unknown_slot_is_rejected() {
        let p = RcdPromptSet {
            prompt1: "{tittle}".into(),
            ..Default::default()
        };
        assert!(p.validate().is_err());
        assert!(RcdPromptSet::default().validate().is_ok());
    }

    #[test]
    fn mock_passthrough_gives_three_queries() {
        let mock = MockTeacher::new(7);
        let g = generate(&mock, &item(), &RcdPromptSet::default(), &quick_cfg(3), None).unwrap();
        assert_eq!(g.output.queries.len(), 3);
        assert!(g.output.summary.contains("City Hospital"));
        assert!(g.output.queries.iter().all(|q| !q.reason.is_empty()));
        assert_eq!(g.attempts, 3);
    }

    #[test]
    fn retries_then_succeeds() {
        let mock = MockTeacher::new(1);
        let scripted = Scripted {
            failures_left: Mutex::new(2),
            answer: Box::new(move |p| mock.answer(p)),
            calls: AtomicUsize::new(0),
        };
        let mut attempts = 0;
        let prompt = render_rcd_prompts(&item(), &RcdPromptSet::default()).unwrap().prompts[0].clone();
        let out = call_with_retry(&scripted, &prompt, &quick_cfg(3).client, &mut attempts);
        assert!(out.is_ok());
        assert_eq!(attempts, 3);
    }

    #[test]
    fn retries_exhausted_is_item_error() {
        let scripted = Scripted {
            failures_left: Mutex::new(10),
            answer: Box::new(|_| String::new()),
            calls: AtomicUsize::new(0),
        };
        let err = generate(&scripted, &item(), &RcdPromptSet::default(), &quick_cfg(2), None).unwrap_err();
        assert_eq!(err.reason, RcdFailureReason::RetriesExhausted);
        assert_eq!(scripted.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn malformed_payload_emits_nothing() {
        let scripted = Scripted {
            failures_left: Mutex::new(0),
            answer: Box::new(|_| "{\"oops\": true}".into()),
            calls: AtomicUsize::new(0),
        };
        let catalog: Catalog = [item()].into_iter().collect();
        let run = run_rcd(
            &catalog,
            &scripted,
            &RcdPromptSet::default(),
            &quick_cfg(0),
            None,
            &HashedNgramEncoder::default(),
        )
        .unwrap();
        assert!(run.instances.is_empty());
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].reason, RcdFailureReason::UnparseableResponse);
        assert!(run.failures[0].detail.contains("oops"));
    }

    #[test]
    fn section_parser_is_tolerant() {
        let s = parse_sections("1. Query: a\n- Query 2: b\n\nSummary: first\ncontinued\nnoise");
        assert_eq!(
            s,
            vec![
                ("query".into(), "a".into()),
                ("query".into(), "b".into()),
                ("summary".into(), "first continued noise".into()),
            ]
        );
    }

    fn output(summary: &str, queries: &[&str]) -> RcdOutput {
        RcdOutput {
            item_id: "h1".into(),
            summary: summary.into(),
            background: String::new(),
            queries: queries
                .iter()
                .map(|q| GeneratedQuery {
                    text: q.to_string(),
                    reason: "because".into(),
                })
                .collect(),
        }
    }

    #[test]
    fn validation_rules() {
        let enc = HashedNgramEncoder::default();
        let cfg = RcdConfig::default();
        let dup = output("City Hospital offers care", &["City Hospital clinic", "City  Hospital clinic"]);
        assert_eq!(validate_rcd_output(&dup, &item(), &cfg, &enc).unwrap().queries.len(), 1);

        let short = output("abc", &["City Hospital"]);
        let err = validate_rcd_output(&short, &item(), &cfg, &enc).unwrap_err();
        assert_eq!(err.reason.code(), "summary_too_short");

        let long = output("City Hospital offers care", &[&"City Hospital ".repeat(6)]);
        assert_eq!(
            validate_rcd_output(&long, &item(), &cfg, &enc).unwrap_err().reason,
            RcdFailureReason::NoValidQueries
        );
    }

    #[test]
    fn emission_counts() {
        let out = output("City Hospital offers care", &["a", "b", "c"]);
        let docs = emit_rcd_examples(&out, &item());
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].kind, RcdKind::Summary);
        assert_eq!(docs[0].text, "City Hospital offers care");
        assert_eq!(docs[1].text.lines().count(), 4);
        assert_eq!(docs[1].text.matches("Reason:").count(), 3);
    }

    #[test]
    fn cache_makes_reruns_free() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let mock = MockTeacher::new(3);
        let prompts = RcdPromptSet::default();
        let first = generate(&mock, &item(), &prompts, &quick_cfg(0), Some(&cache)).unwrap();
        let calls = mock.calls();
        let second = generate(&mock, &item(), &prompts, &quick_cfg(0), Some(&cache)).unwrap();
        assert_eq!(mock.calls(), calls);
        assert!(second.cached);
        assert_eq!(first.output, second.output);
    }
}
