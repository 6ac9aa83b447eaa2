//! Continual pretraining over DKE, ICP and RCD data, and the six-variant
//! ablation that compares them after identical fine-tuning.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, LabeledTriple};
use crate::dke::{
    apply_token_mask, emit_dke_examples, item_seed, DkeRecord, JointSequence, MaskConfig,
    MaskedExample, MAX_SEQ_LEN,
};
use crate::embed::HashedNgramEncoder;
use crate::error::{Error, Result};
use crate::icp::{build_icp_instances, build_mappings, DirectionFilter, IcpTemplate, ScreenConfig};
use crate::metrics::{evaluate, EvalRecord, EvalReport, DEFAULT_BUCKET_EDGES};
use crate::mlm::{AdamConfig, MixedLossConfig, ModelConfig, Optimizer, OptimizerConfig, TrainUnit, TrainableMlm};
use crate::pet::{fine_tune, relevance_score, BoundPrompt, RelevancePrompt, SftConfig};
use crate::rcd::{run_rcd, MockTeacher, RcdConfig, RcdPromptSet, DOC_LABELS};
use crate::synth::{generate_world, World, WorldConfig};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Stops after this many optimizer steps; 0 runs every epoch in full.
    #[serde(default)]
    pub max_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub alpha: f64,
    pub mask: MaskConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            max_steps: 0,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            alpha: MixedLossConfig::default().alpha,
            mask: MaskConfig::default(),
            seed: 42,
        }
    }
}

/// Pretraining material. DKE records carry their own per-epoch masks;
/// plain-text documents are token-masked afresh on every pass.
#[derive(Debug, Clone, Default)]
pub struct PretrainData {
    pub dke: Vec<DkeRecord>,
    pub texts: Vec<JointSequence>,
}

impl PretrainData {
    pub fn is_empty(&self) -> bool {
        self.dke.is_empty() && self.texts.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub examples: usize,
    pub final_epoch_loss: f64,
}

enum Example<'a> {
    Pair(&'a DkeRecord),
    Text(MaskedExample),
}

pub fn pretrain(
    model: &mut TrainableMlm,
    data: &PretrainData,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    MixedLossConfig { alpha: cfg.alpha }.validate()?;
    let dke_epochs = data.dke.iter().map(|r| r.epoch + 1).max().unwrap_or(1);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = PretrainReport::default();
    let capped = |steps: usize| cfg.max_steps > 0 && steps >= cfg.max_steps;
    for epoch in 0..cfg.epochs {
        if capped(report.steps) {
            break;
        }
        let mut examples: Vec<Example<'_>> = data
            .dke
            .iter()
            .filter(|r| r.epoch == epoch % dke_epochs)
            .map(Example::Pair)
            .collect();
        for (i, seq) in data.texts.iter().enumerate() {
            let seed = item_seed(cfg.mask.rng_seed, &format!("text{i}"), epoch);
            examples.push(Example::Text(apply_token_mask(
                seq,
                &cfg.mask.with_seed(seed),
                model.vocab_size(),
            )?));
        }
        examples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for chunk in examples.chunks(cfg.batch_size) {
            if capped(report.steps) {
                break;
            }
            let units: Vec<TrainUnit<'_>> = chunk
                .iter()
                .map(|ex| match ex {
                    Example::Pair(r) => TrainUnit::Mixed {
                        token: &r.token,
                        segment: &r.segment,
                        alpha: cfg.alpha,
                    },
                    Example::Text(m) => TrainUnit::Masked(m),
                })
                .collect();
            epoch_loss += optimizer.step(model, &units)? * units.len() as f64;
            report.steps += 1;
            seen += units.len();
        }
        report.examples += seen;
        report.final_epoch_loss = if seen == 0 { 0.0 } else { epoch_loss / seen as f64 };
    }
    Ok(report)
}

/// Scores triples and evaluates. Triples with unknown items are skipped.
pub fn score_triples(
    model: &TrainableMlm,
    prompt: &BoundPrompt,
    vocab: &Vocab,
    catalog: &Catalog,
    triples: &[LabeledTriple],
) -> Result<Vec<EvalRecord>> {
    triples
        .iter()
        .filter_map(|t| catalog.get(&t.item_id).map(|item| (t, item)))
        .map(|(t, item)| {
            let r = relevance_score(model, prompt, vocab, &t.query, item)?;
            Ok(EvalRecord::new(t.query.clone(), r.score, t.label.is_relevant()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Dke,
    Icp,
    Rcd,
    DkeIcp,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Dke,
        Variant::Icp,
        Variant::Rcd,
        Variant::DkeIcp,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dke => "+ DKE",
            Variant::Icp => "+ ICP",
            Variant::Rcd => "+ RCD",
            Variant::DkeIcp => "+ DKE + ICP",
            Variant::Full => "+ DKE + ICP + RCD (full)",
        }
    }

    pub fn uses(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::Dke => (true, false, false),
            Variant::Icp => (false, true, false),
            Variant::Rcd => (false, false, true),
            Variant::DkeIcp => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub screen: ScreenConfig,
    /// Top queries per item in DKE sequences.
    pub k: usize,
    pub rcd: RcdConfig,
}

impl Default for AblationConfig {
    /// Settings calibrated for the default synthetic world.
    fn default() -> Self {
        let adam = |lr| {
            OptimizerConfig::Adam(AdamConfig {
                lr,
                ..Default::default()
            })
        };
        Self {
            world: WorldConfig::default(),
            model: ModelConfig {
                dim: 32,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 20,
                optimizer: adam(0.01),
                ..Default::default()
            },
            sft: SftConfig {
                epochs: 10,
                optimizer: adam(0.005),
                ..Default::default()
            },
            screen: ScreenConfig {
                sigma: 0.05,
                ..Default::default()
            },
            k: 5,
            rcd: RcdConfig {
                client: crate::rcd::TeacherClientConfig {
                    backoff: std::time::Duration::ZERO,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

/// Everything the variants share for one world.
pub struct AblationData {
    pub world: World,
    pub catalog: Catalog,
    pub vocab: Vocab,
    pub prompt: RelevancePrompt,
    pub dke: Vec<DkeRecord>,
    pub icp: Vec<JointSequence>,
    pub rcd: Vec<JointSequence>,
}

/// Texts a vocabulary must cover: rendered item fields, distinct queries,
/// prompt and ICP template words, and RCD document labels.
pub fn vocab_texts<'a>(
    catalog: &Catalog,
    queries: impl IntoIterator<Item = &'a str>,
    prompt: &RelevancePrompt,
    template: &IcpTemplate,
) -> Vec<String> {
    let mut texts: Vec<String> = catalog
        .iter()
        .map(|item| item.fields().iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join(" "))
        .collect();
    let queries: BTreeSet<&str> = queries.into_iter().collect();
    texts.extend(queries.into_iter().map(str::to_string));
    texts.extend(prompt.vocabulary_texts());
    texts.push(template.q2i.clone());
    texts.push(template.i2q.clone());
    texts.push(DOC_LABELS.to_string());
    texts
}

pub fn prepare_ablation(cfg: &AblationConfig) -> Result<AblationData> {
    let world = generate_world(&cfg.world)?;
    let catalog: Catalog = world.items.iter().cloned().collect();
    let encoder = HashedNgramEncoder::default();
    let template = IcpTemplate::default();
    let icp = build_icp_instances(
        &world.clicks,
        &catalog,
        &cfg.screen,
        &template,
        &encoder,
        DirectionFilter::Both,
    )?;
    let teacher = MockTeacher::new(cfg.world.seed);
    let rcd = run_rcd(&catalog, &teacher, &RcdPromptSet::default(), &cfg.rcd, None, &encoder)?;

    let prompt = RelevancePrompt::default();
    let queries = world
        .clicks
        .iter()
        .map(|c| c.query.as_str())
        .chain(world.train.iter().chain(&world.valid).chain(&world.test).map(|t| t.query.as_str()));
    let mut texts = vocab_texts(&catalog, queries, &prompt, &template);
    texts.extend(icp.instances.iter().map(|i| i.text.clone()));
    texts.extend(rcd.instances.iter().map(|i| i.text.clone()));
    let vocab = Vocab::build(&texts);

    let mappings = build_mappings(&world.clicks);
    let dke = emit_dke_examples(
        &catalog,
        &mappings.i2q,
        cfg.k,
        &cfg.pretrain.mask,
        &vocab,
        cfg.pretrain.epochs,
    )?
    .records;
    let single = |text: &str| JointSequence::single_segment(&vocab, text, MAX_SEQ_LEN);
    let icp = icp.instances.iter().map(|i| single(&i.text)).collect();
    let rcd = rcd.instances.iter().map(|i| single(&i.text)).collect();
    Ok(AblationData {
        world,
        catalog,
        vocab,
        prompt,
        dke,
        icp,
        rcd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub pretrain_examples: usize,
    pub report: EvalReport,
}

pub fn run_variant(data: &AblationData, cfg: &AblationConfig, variant: Variant) -> Result<AblationRow> {
    let bound = data.prompt.bind(&data.vocab)?;
    let mut model = TrainableMlm::new(data.vocab.len(), &cfg.model)?;
    let (dke, icp, rcd) = variant.uses();
    let mut pre = PretrainData::default();
    if dke {
        pre.dke = data.dke.clone();
    }
    if icp {
        pre.texts.extend(data.icp.iter().cloned());
    }
    if rcd {
        pre.texts.extend(data.rcd.iter().cloned());
    }
    let mut pretrain_examples = 0;
    if !pre.is_empty() {
        pretrain_examples = pretrain(&mut model, &pre, &cfg.pretrain)?.examples;
    }
    fine_tune(&mut model, &data.world.train, &data.catalog, &bound, &data.vocab, &cfg.sft)?;
    let records = score_triples(&model, &bound, &data.vocab, &data.catalog, &data.world.test)?;
    Ok(AblationRow {
        variant,
        label: variant.label().to_string(),
        pretrain_examples,
        report: evaluate(&records, &DEFAULT_BUCKET_EDGES)?,
    })
}

/// All six variants on one world, in table order.
pub fn run_ablation(cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    let data = prepare_ablation(cfg)?;
    Variant::ALL
        .par_iter()
        .map(|&v| run_variant(&data, cfg, v))
        .collect()
}

/// Ordering the six-row table must show: baseline at least 0.80, no single
/// method below baseline, full model at least 0.02 above it.
pub fn ordering_holds(rows: &[AblationRow]) -> bool {
    let auc = |v: Variant| rows.iter().find(|r| r.variant == v).map(|r| r.report.auc);
    let (Some(base), Some(full)) = (auc(Variant::Baseline), auc(Variant::Full)) else {
        return false;
    };
    let singles = [Variant::Dke, Variant::Icp, Variant::Rcd];
    base >= 0.80
        && singles.iter().all(|&v| auc(v).is_some_and(|a| a >= base))
        && full >= base + 0.02
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<28} {:>7} {:>7} {:>7}\n", "variant", "acc", "f1", "auc");
    for r in rows {
        out.push_str(&format!(
            "{:<28} {:>7.4} {:>7.4} {:>7.4}\n",
            r.label, r.report.acc, r.report.f1, r.report.auc
        ));
    }
    out
}
