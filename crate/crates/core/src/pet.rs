//! Cloze-style relevance scoring: the prompt `Is {Q} and {I} related? [MASK]`
//! is filled in and the model's preference between the verbalizers `no` and
//! `yes` at the mask slot becomes the relevance score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemDoc, LabeledTriple};
use crate::dke::{MaskKind, MaskedExample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::mlm::{sigmoid, verbalizer_logits, Optimizer, OptimizerConfig, TrainUnit, TrainableMlm};
use crate::vocab::{TokenId, Vocab, MASK, MASK_ID, UNK_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevancePrompt {
    pub template: String,
    /// (negative, positive) verbalizer tokens for labels (0, 1).
    pub verbalizers: (String, String),
}

impl Default for RelevancePrompt {
    fn default() -> Self {
        Self {
            template: "Is {Q} and {I} related? [MASK]".into(),
            verbalizers: ("no".into(), "yes".into()),
        }
    }
}

/// A prompt checked against a vocabulary.
#[derive(Debug, Clone)]
pub struct BoundPrompt {
    prompt: RelevancePrompt,
    pub no: TokenId,
    pub yes: TokenId,
}

impl RelevancePrompt {
    pub fn validate(&self) -> Result<()> {
        for slot in ["{Q}", "{I}", MASK] {
            let n = self.template.matches(slot).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "prompt template must contain {slot} exactly once (found {n})"
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, vocab: &Vocab) -> Result<BoundPrompt> {
        self.validate()?;
        let lookup = |tok: &str| {
            vocab
                .id(tok)
                .ok_or_else(|| Error::Config(format!("verbalizer {tok:?} is not in the vocabulary")))
        };
        Ok(BoundPrompt {
            no: lookup(&self.verbalizers.0)?,
            yes: lookup(&self.verbalizers.1)?,
            prompt: self.clone(),
        })
    }

    pub fn render_text(&self, query: &str, item: &ItemDoc) -> String {
        self.template
            .replace("{Q}", query)
            .replace("{I}", &item.short_text())
    }

    /// Texts that must be representable in the vocabulary.
    pub fn vocabulary_texts(&self) -> Vec<String> {
        vec![
            self.template.replace("{Q}", " ").replace("{I}", " "),
            self.verbalizers.0.clone(),
            self.verbalizers.1.clone(),
        ]
    }
}

impl BoundPrompt {
    pub fn prompt(&self) -> &RelevancePrompt {
        &self.prompt
    }
}

/// Encodes user-supplied text; a literal mask token inside it becomes `[UNK]`.
fn encode_content(vocab: &Vocab, text: &str) -> Vec<TokenId> {
    vocab
        .encode(text)
        .into_iter()
        .map(|id| if id == MASK_ID { UNK_ID } else { id })
        .collect()
}

/// Builds the prompt example. Exactly one position is masked: the template's
/// mask slot. Its label is the verbalizer of `label` when given and
/// [`IGNORE_LABEL`] otherwise.
pub fn pet_render(
    prompt: &BoundPrompt,
    vocab: &Vocab,
    query: &str,
    item: &ItemDoc,
    label: Option<bool>,
) -> Result<MaskedExample> {
    if query.trim().is_empty() {
        return Err(Error::invalid("query must be non-empty"));
    }
    let template = &prompt.prompt.template;
    let mut ids = Vec::new();
    let mut rest = template.as_str();
    while !rest.is_empty() {
        let next_q = rest.find("{Q}");
        let next_i = rest.find("{I}");
        let (at, slot) = match (next_q, next_i) {
            (Some(q), Some(i)) if q < i => (q, "{Q}"),
            (Some(_), Some(i)) => (i, "{I}"),
            (Some(q), None) => (q, "{Q}"),
            (None, Some(i)) => (i, "{I}"),
            (None, None) => (rest.len(), ""),
        };
        ids.extend(vocab.encode(&rest[..at]));
        match slot {
            "{Q}" => ids.extend(encode_content(vocab, query)),
            "{I}" => ids.extend(encode_content(vocab, &item.short_text())),
            _ => {}
        }
        rest = &rest[(at + slot.len()).min(rest.len())..];
    }
    let mask_positions: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == MASK_ID)
        .map(|(i, _)| i)
        .collect();
    if mask_positions.len() != 1 {
        return Err(Error::Config("prompt template has no single mask slot".into()));
    }
    let pos = mask_positions[0];
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    if let Some(l) = label {
        labels[pos] = if l { prompt.yes } else { prompt.no } as i64;
    }
    let len = ids.len();
    Ok(MaskedExample {
        input_ids: ids,
        labels,
        segment_ids: vec![1; len],
        position_ids: (0..len as u32).collect(),
        mask_kind: MaskKind::Token,
        masked_positions: vec![pos],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relevance {
    pub score: f64,
    pub relevant: bool,
}

/// `p_yes / (p_yes + p_no)` at the mask slot; relevant iff score >= 0.5.
pub fn score_from_logits(logit_no: f64, logit_yes: f64) -> Relevance {
    let score = sigmoid(logit_yes - logit_no);
    Relevance {
        score,
        relevant: score >= 0.5,
    }
}

pub fn relevance_score(
    model: &TrainableMlm,
    prompt: &BoundPrompt,
    vocab: &Vocab,
    query: &str,
    item: &ItemDoc,
) -> Result<Relevance> {
    let ex = pet_render(prompt, vocab, query, item, None)?;
    let (no, yes) = verbalizer_logits(model, &ex, prompt.no, prompt.yes);
    Ok(score_from_logits(no, yes))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SftOutcome {
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

/// One SGD step of verbalizer cross-entropy over a batch of triples.
/// Triples whose item is missing from the catalog are skipped.
pub fn sft_step(
    model: &mut TrainableMlm,
    triples: &[LabeledTriple],
    catalog: &Catalog,
    prompt: &BoundPrompt,
    vocab: &Vocab,
    optimizer: &mut Optimizer,
) -> Result<SftOutcome> {
    let mut examples = Vec::with_capacity(triples.len());
    let mut skipped = 0;
    for t in triples {
        match catalog.get(&t.item_id) {
            Some(item) => {
                let relevant = t.label.is_relevant();
                examples.push((pet_render(prompt, vocab, &t.query, item, Some(relevant))?, relevant));
            }
            None => skipped += 1,
        }
    }
    if examples.is_empty() {
        return Ok(SftOutcome {
            loss: 0.0,
            used: 0,
            skipped,
        });
    }
    let units: Vec<TrainUnit<'_>> = examples
        .iter()
        .map(|(ex, label)| TrainUnit::Verbalizer {
            example: ex,
            no: prompt.no,
            yes: prompt.yes,
            label: *label,
        })
        .collect();
    let loss = optimizer.step(model, &units)?;
    Ok(SftOutcome {
        loss,
        used: examples.len(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SftReport {
    pub steps: usize,
    pub skipped: usize,
    pub final_epoch_loss: f64,
}

/// Epochs of shuffled mini-batch SFT.
pub fn fine_tune(
    model: &mut TrainableMlm,
    triples: &[LabeledTriple],
    catalog: &Catalog,
    prompt: &BoundPrompt,
    vocab: &Vocab,
    cfg: &SftConfig,
) -> Result<SftReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut report = SftReport::default();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut used = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledTriple> = chunk.iter().map(|&i| triples[i].clone()).collect();
            let out = sft_step(model, &batch, catalog, prompt, vocab, &mut optimizer)?;
            epoch_loss += out.loss * out.used as f64;
            used += out.used;
            report.skipped += out.skipped;
            report.steps += 1;
        }
        report.final_epoch_loss = if used > 0 { epoch_loss / used as f64 } else { 0.0 };
    }
    Ok(report)
}
