//! Joint query + multi-field item sequences and their masked views.
//!
//! Layout of an assembled sequence:
//!
//! ```text
//! <sop> q1 <eop> ... <sop> qk <eop> <sop> name1: value1 <eop> ... <sop> namem: valuem <eop>
//! ```
//!
//! Separators carry segment 0, query pieces 1..=k, item field pieces
//! k+1..=k+m. Position ids run continuously over the whole sequence.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::corpus::{Catalog, ItemDoc};
use crate::error::{Error, Result};
use crate::icp::CandidateSet;
use crate::vocab::{TokenId, Vocab, EOP_ID, FIRST_REGULAR_ID, MASK_ID, PAD_ID, SOP_ID};

pub const IGNORE_LABEL: i64 = -100;
pub const MAX_QUERIES: usize = 5;
pub const MAX_SEQ_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PieceSpan {
    pub segment: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointSequence {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub piece_spans: Vec<PieceSpan>,
    /// Pieces dropped from the tail to respect the length limit.
    pub truncated_pieces: usize,
}

impl JointSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// One unsegmented span of plain text (ICP, RCD and prompt inputs).
    pub fn single_segment(vocab: &Vocab, text: &str, max_len: usize) -> Self {
        let mut token_ids = vocab.encode(text);
        token_ids.truncate(max_len);
        let len = token_ids.len();
        Self {
            token_ids,
            segment_ids: vec![1; len],
            position_ids: (0..len as u32).collect(),
            piece_spans: vec![PieceSpan {
                segment: 1,
                start: 0,
                end: len,
            }],
            truncated_pieces: 0,
        }
    }
}

pub fn is_separator(id: TokenId) -> bool {
    id == SOP_ID || id == EOP_ID || id == PAD_ID
}

pub fn render_field(name: &str, value: &str) -> String {
    format!("{name}: {value}")
}

pub fn assemble_joint_sequence(
    queries: &[&str],
    item: &ItemDoc,
    vocab: &Vocab,
) -> Result<JointSequence> {
    if queries.is_empty() {
        return Err(Error::invalid("at least one query is required"));
    }
    assemble_with_limit(queries, item, vocab, MAX_SEQ_LEN)
}

/// Like [`assemble_joint_sequence`] but admits an empty query list
/// (item-only sequences) and an explicit length limit.
pub fn assemble_with_limit(
    queries: &[&str],
    item: &ItemDoc,
    vocab: &Vocab,
    max_len: usize,
) -> Result<JointSequence> {
    if queries.len() > MAX_QUERIES {
        return Err(Error::invalid(format!(
            "{} queries exceed the limit of {MAX_QUERIES}",
            queries.len()
        )));
    }
    if let Some(pos) = queries.iter().position(|q| q.trim().is_empty()) {
        return Err(Error::invalid(format!("query {pos} is empty")));
    }
    if item.fields().is_empty() {
        return Err(Error::invalid(format!("item {} has no fields", item.item_id)));
    }

    let pieces: Vec<Vec<TokenId>> = queries
        .iter()
        .map(|q| vocab.encode(q))
        .chain(
            item.fields()
                .iter()
                .map(|(n, v)| vocab.encode(&render_field(n, v))),
        )
        .collect();

    let mut seq = JointSequence {
        token_ids: Vec::new(),
        segment_ids: Vec::new(),
        position_ids: Vec::new(),
        piece_spans: Vec::new(),
        truncated_pieces: 0,
    };
    for (i, piece) in pieces.iter().enumerate() {
        if seq.token_ids.len() + piece.len() + 2 > max_len {
            seq.truncated_pieces = pieces.len() - i;
            break;
        }
        let segment = i as u32 + 1;
        seq.token_ids.push(SOP_ID);
        seq.segment_ids.push(0);
        let start = seq.token_ids.len();
        seq.token_ids.extend_from_slice(piece);
        seq.segment_ids.extend(std::iter::repeat(segment).take(piece.len()));
        seq.piece_spans.push(PieceSpan {
            segment,
            start,
            end: seq.token_ids.len(),
        });
        seq.token_ids.push(EOP_ID);
        seq.segment_ids.push(0);
    }
    if seq.piece_spans.is_empty() {
        return Err(Error::invalid(format!(
            "first piece of item {} does not fit in {max_len} tokens",
            item.item_id
        )));
    }
    seq.position_ids = (0..seq.token_ids.len() as u32).collect();
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Token,
    Segment,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Token => "token",
            MaskKind::Segment => "segment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub token_mask_rate: f64,
    pub replace_mask_prob: f64,
    pub replace_random_prob: f64,
    pub keep_prob: f64,
    pub rng_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            token_mask_rate: 0.15,
            replace_mask_prob: 0.8,
            replace_random_prob: 0.1,
            keep_prob: 0.1,
            rng_seed: 42,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let sum = self.replace_mask_prob + self.replace_random_prob + self.keep_prob;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mask replacement probabilities sum to {sum}, not 1"
            )));
        }
        if [self.replace_mask_prob, self.replace_random_prob, self.keep_prob]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config("mask replacement probabilities must lie in [0, 1]".into()));
        }
        if !(self.token_mask_rate > 0.0 && self.token_mask_rate <= 1.0) {
            return Err(Error::Config(format!(
                "token_mask_rate {} outside (0, 1]",
                self.token_mask_rate
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<i64>,
    pub segment_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub mask_kind: MaskKind,
    pub masked_positions: Vec<usize>,
}

impl MaskedExample {
    /// Rebuilds from stored ids and labels; masked positions are the
    /// non-ignored labels.
    pub fn from_parts(
        input_ids: Vec<TokenId>,
        labels: Vec<i64>,
        segment_ids: Vec<u32>,
        position_ids: Vec<u32>,
        mask_kind: MaskKind,
    ) -> Result<Self> {
        let n = input_ids.len();
        if labels.len() != n || segment_ids.len() != n || position_ids.len() != n {
            return Err(Error::invalid("masked example id sequences differ in length"));
        }
        let masked_positions: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_LABEL)
            .map(|(i, _)| i)
            .collect();
        if masked_positions.is_empty() {
            return Err(Error::invalid("masked example has no masked position"));
        }
        Ok(Self {
            input_ids,
            labels,
            segment_ids,
            position_ids,
            mask_kind,
            masked_positions,
        })
    }

    /// Substitutes labels back at masked positions.
    pub fn original_ids(&self) -> Vec<TokenId> {
        let mut ids = self.input_ids.clone();
        for &p in &self.masked_positions {
            ids[p] = self.labels[p] as TokenId;
        }
        ids
    }

    pub fn target_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.masked_positions.iter().map(|&p| self.labels[p] as TokenId)
    }
}

fn maskable_positions(seq: &JointSequence) -> Vec<usize> {
    seq.token_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| !is_separator(id))
        .map(|(i, _)| i)
        .collect()
}

pub fn apply_token_mask(
    seq: &JointSequence,
    cfg: &MaskConfig,
    vocab_size: usize,
) -> Result<MaskedExample> {
    cfg.validate()?;
    let maskable = maskable_positions(seq);
    if maskable.is_empty() {
        return Err(Error::invalid("sequence has no maskable tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut selected: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < cfg.token_mask_rate)
        .collect();
    if selected.is_empty() {
        selected.push(maskable[rng.gen_range(0..maskable.len())]);
    }

    let mut input_ids = seq.token_ids.clone();
    let mut labels = vec![IGNORE_LABEL; seq.len()];
    for &p in &selected {
        labels[p] = seq.token_ids[p] as i64;
        let u: f64 = rng.gen();
        input_ids[p] = if u < cfg.replace_mask_prob {
            MASK_ID
        } else if u < cfg.replace_mask_prob + cfg.replace_random_prob {
            if vocab_size as TokenId > FIRST_REGULAR_ID {
                rng.gen_range(FIRST_REGULAR_ID..vocab_size as TokenId)
            } else {
                MASK_ID
            }
        } else {
            seq.token_ids[p]
        };
    }
    Ok(MaskedExample {
        input_ids,
        labels,
        segment_ids: seq.segment_ids.clone(),
        position_ids: seq.position_ids.clone(),
        mask_kind: MaskKind::Token,
        masked_positions: selected,
    })
}

/// Masks every token of one uniformly chosen piece.
pub fn apply_segment_mask(seq: &JointSequence, cfg: &MaskConfig) -> Result<MaskedExample> {
    let candidates: Vec<&PieceSpan> = seq.piece_spans.iter().filter(|s| s.end > s.start).collect();
    if candidates.is_empty() {
        return Err(Error::invalid("sequence has no non-empty piece"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let span = candidates[rng.gen_range(0..candidates.len())];
    let mut input_ids = seq.token_ids.clone();
    let mut labels = vec![IGNORE_LABEL; seq.len()];
    for p in span.start..span.end {
        labels[p] = seq.token_ids[p] as i64;
        input_ids[p] = MASK_ID;
    }
    Ok(MaskedExample {
        input_ids,
        labels,
        segment_ids: seq.segment_ids.clone(),
        position_ids: seq.position_ids.clone(),
        mask_kind: MaskKind::Segment,
        masked_positions: (span.start..span.end).collect(),
    })
}

pub fn stable_hash(s: &str) -> u64 {
    xxh3_64(s.as_bytes())
}

/// Seed for one item's masking in one epoch; independent of processing order.
pub fn item_seed(seed: u64, item_id: &str, epoch: usize) -> u64 {
    (seed ^ stable_hash(item_id)).wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DkeRecord {
    pub item_id: String,
    pub epoch: usize,
    pub token: MaskedExample,
    pub segment: MaskedExample,
}

#[derive(Debug, Clone, Default)]
pub struct DkeBuild {
    pub records: Vec<DkeRecord>,
    pub item_only: usize,
    pub truncated_items: usize,
}

/// One token-masked and one segment-masked view per item per epoch, using
/// the item's top-`k` queries by clicks.
pub fn emit_dke_examples(
    catalog: &Catalog,
    i2q: &BTreeMap<String, CandidateSet>,
    k: usize,
    cfg: &MaskConfig,
    vocab: &Vocab,
    epochs: usize,
) -> Result<DkeBuild> {
    cfg.validate()?;
    if k > MAX_QUERIES {
        return Err(Error::Config(format!("k = {k} exceeds {MAX_QUERIES}")));
    }
    let mut build = DkeBuild::default();
    for item in catalog.iter() {
        let queries: Vec<&str> = i2q
            .get(&item.item_id)
            .map(|set| set.candidates.iter().take(k).map(|c| c.id.as_str()).collect())
            .unwrap_or_default();
        if queries.is_empty() {
            build.item_only += 1;
        }
        let seq = assemble_with_limit(&queries, item, vocab, MAX_SEQ_LEN)?;
        if seq.truncated_pieces > 0 {
            build.truncated_items += 1;
        }
        for epoch in 0..epochs {
            let base = item_seed(cfg.rng_seed, &item.item_id, epoch);
            let token = apply_token_mask(&seq, &cfg.with_seed(base), vocab.len())?;
            let segment = apply_segment_mask(&seq, &cfg.with_seed(base ^ 0x5EED_5E67))?;
            build.records.push(DkeRecord {
                item_id: item.item_id.clone(),
                epoch,
                token,
                segment,
            });
        }
    }
    Ok(build)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DkeLine {
    pub item_id: String,
    #[serde(default)]
    pub epoch: usize,
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<i64>,
    pub segment_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub mask_kind: MaskKind,
}

impl DkeLine {
    pub fn from_example(item_id: &str, epoch: usize, ex: &MaskedExample) -> Self {
        Self {
            item_id: item_id.to_string(),
            epoch,
            input_ids: ex.input_ids.clone(),
            labels: ex.labels.clone(),
            segment_ids: ex.segment_ids.clone(),
            position_ids: ex.position_ids.clone(),
            mask_kind: ex.mask_kind,
        }
    }

    pub fn into_example(self) -> Result<MaskedExample> {
        MaskedExample::from_parts(
            self.input_ids,
            self.labels,
            self.segment_ids,
            self.position_ids,
            self.mask_kind,
        )
    }
}

pub fn write_dke<W: std::io::Write>(mut out: W, records: &[DkeRecord]) -> std::io::Result<()> {
    for r in records {
        for ex in [&r.token, &r.segment] {
            serde_json::to_writer(&mut out, &DkeLine::from_example(&r.item_id, r.epoch, ex))?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads `dke.jsonl` back into (token, segment) pairs.
pub fn read_dke<R: std::io::BufRead>(reader: R) -> Result<Vec<DkeRecord>> {
    let mut out = Vec::new();
    let mut pending: Option<(String, usize, MaskedExample)> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dke>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DkeLine = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("dke line {}: {e}", i + 1)))?;
        let item_id = parsed.item_id.clone();
        let epoch = parsed.epoch;
        let ex = parsed.into_example()?;
        match (pending.take(), ex.mask_kind) {
            (None, MaskKind::Token) => pending = Some((item_id, epoch, ex)),
            (Some((id, e, token)), MaskKind::Segment) if id == item_id && e == epoch => out.push(DkeRecord {
                item_id: id,
                epoch,
                token,
                segment: ex,
            }),
            _ => {
                return Err(Error::invalid(format!(
                    "dke line {}: expected token/segment pairs per item",
                    i + 1
                )))
            }
        }
    }
    if pending.is_some() {
        return Err(Error::invalid("dke stream ends with an unpaired token example"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["q a b c title : City Hospital category healthcare x y z"])
    }

    fn item(fields: &[(&str, &str)]) -> ItemDoc {
        ItemDoc::new("i1", fields.iter().copied()).unwrap()
    }

    #[test]
    fn single_query_single_field_layout() {
        let v = vocab();
        let seq = assemble_joint_sequence(&["q"], &item(&[("title", "City Hospital")]), &v).unwrap();
        // <sop> q <eop> <sop> title : City Hospital <eop>
        assert_eq!(seq.len(), 2 * 2 + 1 + 4);
        assert_eq!(seq.position_ids, (0..seq.len() as u32).collect::<Vec<_>>());
        assert_eq!(seq.token_ids[0], SOP_ID);
        assert_eq!(seq.token_ids[2], EOP_ID);
    }

    #[test]
    fn segment_ids_follow_pieces() {
        let v = vocab();
        let seq = assemble_joint_sequence(
            &["a b", "c"],
            &item(&[("title", "City"), ("category", "healthcare")]),
            &v,
        )
        .unwrap();
        let mut segs: Vec<u32> = seq
            .token_ids
            .iter()
            .zip(&seq.segment_ids)
            .filter(|(t, _)| !is_separator(**t))
            .map(|(_, s)| *s)
            .collect();
        segs.dedup();
        assert_eq!(segs, vec![1, 2, 3, 4]);
        for (t, s) in seq.token_ids.iter().zip(&seq.segment_ids) {
            assert_eq!(is_separator(*t), *s == 0);
        }
    }

    #[test]
    fn invalid_inputs() {
        let v = vocab();
        let it = item(&[("title", "x")]);
        assert!(assemble_joint_sequence(&[], &it, &v).is_err());
        assert!(assemble_joint_sequence(&["q", " "], &it, &v).is_err());
        assert!(assemble_joint_sequence(&["q"; 6], &it, &v).is_err());
    }

    #[test]
    fn tail_pieces_are_dropped_whole() {
        let v = vocab();
        let long = vec!["x"; 10].join(" ");
        let it = item(&[("title", &long), ("category", &long)]);
        // Each field piece is 12 tokens (name, ':', 10 values) + 2 separators.
        let seq = assemble_with_limit(&["q"], &it, &v, 3 + 14 + 5).unwrap();
        assert_eq!(seq.piece_spans.len(), 2);
        assert_eq!(seq.truncated_pieces, 1);
        assert_eq!(*seq.token_ids.last().unwrap(), EOP_ID);
    }

    #[test]
    fn force_one_mask_when_rate_tiny() {
        let v = vocab();
        let seq = assemble_joint_sequence(&["a b c"], &item(&[("title", "x y z")]), &v).unwrap();
        let cfg = MaskConfig {
            token_mask_rate: 1e-12,
            ..Default::default()
        };
        for seed in 0..20 {
            let ex = apply_token_mask(&seq, &cfg.with_seed(seed), v.len()).unwrap();
            assert_eq!(ex.masked_positions.len(), 1);
            assert!(!is_separator(seq.token_ids[ex.masked_positions[0]]));
        }
    }

    #[test]
    fn saturated_mask_covers_all_tokens() {
        let v = vocab();
        let seq = assemble_joint_sequence(&["a b"], &item(&[("title", "x y")]), &v).unwrap();
        let cfg = MaskConfig {
            token_mask_rate: 1.0,
            replace_mask_prob: 1.0,
            replace_random_prob: 0.0,
            keep_prob: 0.0,
            rng_seed: 3,
        };
        let ex = apply_token_mask(&seq, &cfg, v.len()).unwrap();
        for (i, &id) in seq.token_ids.iter().enumerate() {
            if is_separator(id) {
                assert_eq!(ex.input_ids[i], id);
                assert_eq!(ex.labels[i], IGNORE_LABEL);
            } else {
                assert_eq!(ex.input_ids[i], MASK_ID);
                assert_eq!(ex.labels[i], id as i64);
            }
        }
        assert_eq!(ex.original_ids(), seq.token_ids);
    }

    #[test]
    fn no_maskable_tokens_is_an_error() {
        let seq = JointSequence {
            token_ids: vec![SOP_ID, EOP_ID],
            segment_ids: vec![0, 0],
            position_ids: vec![0, 1],
            piece_spans: vec![],
            truncated_pieces: 0,
        };
        assert!(apply_token_mask(&seq, &MaskConfig::default(), 10).is_err());
    }

    #[test]
    fn segment_mask_covers_exact_span() {
        let v = vocab();
        let seq = assemble_joint_sequence(&["a b"], &item(&[("title", "x")]), &v).unwrap();
        for seed in 0..10 {
            let ex = apply_segment_mask(&seq, &MaskConfig::default().with_seed(seed)).unwrap();
            let span = seq
                .piece_spans
                .iter()
                .find(|s| s.start == ex.masked_positions[0])
                .unwrap();
            assert_eq!(ex.masked_positions, (span.start..span.end).collect::<Vec<_>>());
        }
        let single = JointSequence::single_segment(&v, "a b c", 512);
        let ex = apply_segment_mask(&single, &MaskConfig::default()).unwrap();
        assert_eq!(ex.masked_positions, vec![0, 1, 2]);
    }

    #[test]
    fn invalid_mask_config() {
        let cfg = MaskConfig {
            keep_prob: 0.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MaskConfig {
            token_mask_rate: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dke_lines_roundtrip() {
        let v = vocab();
        let it = item(&[("title", "City Hospital")]);
        let seq = assemble_joint_sequence(&["q"], &it, &v).unwrap();
        let rec = DkeRecord {
            item_id: "i1".into(),
            epoch: 2,
            token: apply_token_mask(&seq, &MaskConfig::default(), v.len()).unwrap(),
            segment: apply_segment_mask(&seq, &MaskConfig::default()).unwrap(),
        };
        let mut buf = Vec::new();
        write_dke(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back = read_dke(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec]);
    }
}
