//! Oracles and criterion checks shared by the integration suites and the
//! acceptance harness. Every oracle here recomputes its answer by brute
//! force instead of calling the routine it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use forge_core::corpus::{Catalog, ClickRecord, ItemDoc};
use forge_core::dke::{
    apply_segment_mask, apply_token_mask, assemble_with_limit, is_separator, JointSequence,
    MaskConfig, MaskedExample, IGNORE_LABEL,
};
use forge_core::embed::{cosine_sim, HashedNgramEncoder, TextEncoder};
use forge_core::icp::{
    build_icp_instances, Direction, DirectionFilter, IcpInstance, IcpTemplate, ScreenConfig,
};
use forge_core::metrics::auc_scores;
use forge_core::mlm::{
    all_logits, context, grad_check, mixed_loss, GradCheck, MixedLossConfig, ModelConfig,
    TrainUnit, TrainableMlm,
};
use forge_core::pet::{relevance_score, RelevancePrompt};
use forge_core::pretrain::vocab_texts;
use forge_core::rcd::{
    generate, run_rcd, MockTeacher, RcdConfig, RcdFailureReason, RcdPromptSet, TeacherClient,
    TeacherError,
};
use forge_core::serving::{
    batch_score, pair_key, OnlineScorer, ScoreError, Snapshot, SnapshotMeta, Tier,
    RelevanceService,
};
use forge_core::synth::{generate_world, WorldConfig};
use forge_core::vocab::Vocab;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- fuzzing

const LATIN: [&str; 24] = [
    "park", "clinic", "ticket", "bus", "metro", "coffee", "tea", "bank", "loan", "card", "hotel",
    "room", "train", "flight", "visa", "pay", "water", "power", "bill", "tax", "food", "order",
    "movie", "seat",
];
const FIELDS: [&str; 4] = ["title", "keywords", "category", "description"];

fn cjk_pool() -> Vec<char> {
    (0..24u32).map(|i| char::from_u32(0x4E00 + 7 * i).unwrap()).collect()
}

pub fn fuzz_vocab() -> Vocab {
    let mut texts: Vec<String> = LATIN.iter().map(|s| s.to_string()).collect();
    texts.extend(cjk_pool().iter().map(|c| c.to_string()));
    texts.extend(FIELDS.iter().map(|f| format!("{f}:")));
    texts.push("Is and related? no yes".into());
    Vocab::build(texts)
}

fn fuzz_phrase(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let cjk = cjk_pool();
    let n = rng.gen_range(1..=max_words);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                LATIN.choose(rng).unwrap().to_string()
            } else {
                (0..rng.gen_range(1..=3)).map(|_| *cjk.choose(rng).unwrap()).collect()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn fuzz_item(rng: &mut ChaCha8Rng, id: &str, max_words: usize) -> ItemDoc {
    let n = rng.gen_range(1..=FIELDS.len());
    let fields: Vec<(&str, String)> = FIELDS[..n]
        .iter()
        .map(|f| (*f, fuzz_phrase(rng, max_words)))
        .collect();
    ItemDoc::new(id, fields).unwrap()
}

pub fn fuzz_queries(rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..rng.gen_range(0..=5)).map(|_| fuzz_phrase(rng, 4)).collect()
}

/// A joint sequence plus one token-masked and one segment-masked view.
pub struct FuzzCase {
    pub seq: JointSequence,
    pub token: MaskedExample,
    pub segment: MaskedExample,
}

pub fn fuzz_case(rng: &mut ChaCha8Rng, vocab: &Vocab, max_len: usize) -> Option<FuzzCase> {
    let item = fuzz_item(rng, "fz", 12);
    let queries = fuzz_queries(rng);
    let refs: Vec<&str> = queries.iter().map(String::as_str).collect();
    let seq = assemble_with_limit(&refs, &item, vocab, max_len).ok()?;
    let cfg = MaskConfig {
        token_mask_rate: rng.gen_range(0.05..0.5),
        ..Default::default()
    };
    let token = apply_token_mask(&seq, &cfg.with_seed(rng.gen()), vocab.len()).ok()?;
    let segment = apply_segment_mask(&seq, &cfg.with_seed(rng.gen())).ok()?;
    Some(FuzzCase { seq, token, segment })
}

pub fn fuzz_model(vocab: &Vocab, seed: u64) -> TrainableMlm {
    TrainableMlm::new(
        vocab.len(),
        &ModelConfig {
            dim: 8,
            n_segments: 4,
            init_scale: 0.5,
            seed,
        },
    )
    .unwrap()
}

// ---------------------------------------------------------------- losses

/// `log(sum(exp(z)))`, shifted by the maximum.
pub fn lse(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over targets of `lse(z) - z[target]`.
pub fn ce_oracle(model: &TrainableMlm, ex: &MaskedExample) -> f64 {
    let z = all_logits(model, &context(model, ex));
    let norm = lse(&z);
    let targets: Vec<usize> = ex
        .labels
        .iter()
        .filter(|&&l| l != IGNORE_LABEL)
        .map(|&l| l as usize)
        .collect();
    targets.iter().map(|&t| norm - z[t]).sum::<f64>() / targets.len() as f64
}

pub fn criterion_mixed_loss() -> Check {
    ensure(MixedLossConfig::default().alpha == 0.7, || "default alpha is not 0.7".into())?;
    let vocab = fuzz_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 200 {
        let Some(case) = fuzz_case(&mut rng, &vocab, 96) else { continue };
        let model = fuzz_model(&vocab, checked as u64);
        let lt = ce_oracle(&model, &case.token);
        let ls = ce_oracle(&model, &case.segment);
        for alpha in [0.0, 0.3, 0.7, 1.0] {
            let got = mixed_loss(&model, &case.token, &case.segment, &MixedLossConfig { alpha })
                .map_err(|e| e.to_string())?;
            worst = worst.max((got - (alpha * lt + (1.0 - alpha) * ls)).abs());
        }
        checked += 1;
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("{checked} examples x 4 alphas, max deviation {worst:.1e}"))
}

pub fn criterion_gradients() -> Check {
    let vocab = fuzz_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let no = vocab.id("no").unwrap();
    let yes = vocab.id("yes").unwrap();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 100 {
        let Some(case) = fuzz_case(&mut rng, &vocab, 64) else { continue };
        let model = fuzz_model(&vocab, 1000 + checked as u64);
        let unit = match checked % 3 {
            0 => TrainUnit::Masked(&case.token),
            1 => TrainUnit::Mixed {
                token: &case.token,
                segment: &case.segment,
                alpha: 0.7,
            },
            _ => TrainUnit::Verbalizer {
                example: &case.token,
                no,
                yes,
                label: checked % 2 == 0,
            },
        };
        let check = GradCheck {
            seed: checked as u64,
            ..Default::default()
        };
        worst = worst.max(grad_check(&model, &unit, &check).map_err(|e| e.to_string())?);
        checked += 1;
    }
    ensure(worst < 1e-3, || format!("max relative error {worst:e}"))?;
    Ok(format!("{checked} examples, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- ICP

/// A 200-record click log over 20 CJK items and 30 queries drawn from a
/// shared character pool, plus two clicks on an item missing from the catalog.
pub fn click_fixture(seed: u64) -> (Vec<ClickRecord>, Catalog) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<char> = (0..14u32).map(|i| char::from_u32(0x5000 + 3 * i).unwrap()).collect();
    let word = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> String {
        (0..rng.gen_range(lo..=hi)).map(|_| *pool.choose(rng).unwrap()).collect()
    };
    let catalog: Catalog = (0..20)
        .map(|i| {
            let title = word(&mut rng, 2, 4);
            let kw = if i % 4 == 0 { String::new() } else { word(&mut rng, 2, 3) };
            ItemDoc::new(format!("it{i:02}"), [("title", title), ("keywords", kw)]).unwrap()
        })
        .collect();
    let queries: Vec<String> = (0..30).map(|_| word(&mut rng, 2, 4)).collect();
    let mut clicks: Vec<ClickRecord> = (0..198)
        .map(|_| ClickRecord {
            query: queries.choose(&mut rng).unwrap().clone(),
            item_id: format!("it{:02}", rng.gen_range(0..20)),
            clicks: rng.gen_range(1..10),
        })
        .collect();
    for q in &queries[..2] {
        clicks.push(ClickRecord {
            query: q.clone(),
            item_id: "ghost".into(),
            clicks: 5,
        });
    }
    (clicks, catalog)
}

fn short_of(item: &ItemDoc) -> String {
    let title = item.field("title").unwrap_or("");
    match item.field("keywords") {
        Some(kw) if !kw.is_empty() => format!("{title} | {kw}"),
        _ => title.to_string(),
    }
}

/// Nested-loop reimplementation of the four ICP stages.
pub fn brute_force_icp(
    clicks: &[ClickRecord],
    catalog: &Catalog,
    screen: &ScreenConfig,
    encoder: &dyn TextEncoder,
) -> Vec<IcpInstance> {
    let sim = |a: &str, b: &str| cosine_sim(&encoder.embed(a), &encoder.embed(b)).unwrap();
    let mut out = Vec::new();
    for direction in [Direction::Q2I, Direction::I2Q] {
        let key = |c: &ClickRecord| match direction {
            Direction::Q2I => (c.query.clone(), c.item_id.clone()),
            Direction::I2Q => (c.item_id.clone(), c.query.clone()),
        };
        let anchors: BTreeSet<String> = clicks.iter().map(|c| key(c).0).collect();
        for anchor in anchors {
            let anchor_text = match direction {
                Direction::Q2I => anchor.clone(),
                Direction::I2Q => match catalog.get(&anchor) {
                    Some(item) => short_of(item),
                    None => continue,
                },
            };
            let partners: BTreeSet<String> = clicks
                .iter()
                .filter(|c| key(c).0 == anchor)
                .map(|c| key(c).1)
                .collect();
            let mut kept: Vec<(f64, String, String)> = Vec::new();
            for id in partners {
                let text = match direction {
                    Direction::Q2I => match catalog.get(&id) {
                        Some(item) => short_of(item),
                        None => continue,
                    },
                    Direction::I2Q => id.clone(),
                };
                let s = sim(&anchor_text, &text);
                if s >= screen.sigma {
                    kept.push((s, id, text));
                }
            }
            kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            kept.truncate(screen.max_candidates);
            kept.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            if kept.len() < screen.min_candidates {
                continue;
            }
            let listing: Vec<String> = kept
                .iter()
                .enumerate()
                .map(|(i, (_, _, t))| format!("{}. {t}", i + 1))
                .collect();
            let header = match direction {
                Direction::Q2I => format!("Query: {anchor_text}\nRelated services:\n"),
                Direction::I2Q => format!("Service: {anchor_text}\nRelated queries:\n"),
            };
            out.push(IcpInstance {
                direction,
                anchor: anchor.clone(),
                exemplar_ids: kept.iter().map(|k| k.1.clone()).collect(),
                similarities: kept.iter().map(|k| k.0).collect(),
                text: header + &listing.join("\n"),
            });
        }
    }
    out
}

pub fn criterion_icp_oracle() -> Check {
    let (clicks, catalog) = click_fixture(11);
    let encoder = HashedNgramEncoder::default();
    let screen = ScreenConfig {
        sigma: 0.15,
        max_candidates: 4,
        min_candidates: 2,
    };
    let got = build_icp_instances(
        &clicks,
        &catalog,
        &screen,
        &IcpTemplate::default(),
        &encoder,
        DirectionFilter::Both,
    )
    .map_err(|e| e.to_string())?
    .instances;
    let want = brute_force_icp(&clicks, &catalog, &screen, &encoder);
    ensure(want.len() >= 10, || format!("fixture too sparse: {} instances", want.len()))?;
    ensure(got.len() == want.len(), || format!("{} instances, oracle has {}", got.len(), want.len()))?;
    for (g, w) in got.iter().zip(&want) {
        ensure(g == w, || format!("instance differs:\n{g:?}\nvs\n{w:?}"))?;
    }
    let capped = want.iter().filter(|i| i.exemplar_ids.len() == screen.max_candidates).count();
    Ok(format!("{} records, {} identical instances ({capped} at the cap)", clicks.len(), got.len()))
}

pub fn criterion_icp_soundness() -> Check {
    let world = generate_world(&WorldConfig::default()).map_err(|e| e.to_string())?;
    let catalog: Catalog = world.items.iter().cloned().collect();
    let encoder = HashedNgramEncoder::default();
    let screen = ScreenConfig {
        sigma: 0.05,
        ..Default::default()
    };
    let build = build_icp_instances(
        &world.clicks,
        &catalog,
        &screen,
        &IcpTemplate::default(),
        &encoder,
        DirectionFilter::Both,
    )
    .map_err(|e| e.to_string())?;
    let mut violations = 0;
    let mut exemplars = 0;
    for inst in &build.instances {
        let anchor = match inst.direction {
            Direction::Q2I => inst.anchor.clone(),
            Direction::I2Q => short_of(catalog.get(&inst.anchor).unwrap()),
        };
        let av = encoder.embed(&anchor);
        for id in &inst.exemplar_ids {
            let text = match inst.direction {
                Direction::Q2I => short_of(catalog.get(id).unwrap()),
                Direction::I2Q => id.clone(),
            };
            exemplars += 1;
            if cosine_sim(&av, &encoder.embed(&text)).unwrap() < screen.sigma {
                violations += 1;
            }
        }
    }
    ensure(build.instances.len() >= 1000, || format!("only {} instances", build.instances.len()))?;
    ensure(violations == 0, || format!("{violations} exemplars below sigma"))?;
    Ok(format!("{} instances, {exemplars} exemplars, 0 violations", build.instances.len()))
}

// ---------------------------------------------------------------- DKE

/// Structural checks for one sequence and its two masked views.
pub fn dke_case_violations(case: &FuzzCase) -> Vec<String> {
    let mut errs = Vec::new();
    let l = case.seq.len();
    for ex in [&case.token, &case.segment] {
        let expected: Vec<u32> = (0..l as u32).collect();
        if ex.position_ids != expected || case.seq.position_ids != expected {
            errs.push("position ids are not 0..L-1".into());
        }
        let labelled: Vec<usize> = (0..l).filter(|&i| ex.labels[i] != IGNORE_LABEL).collect();
        let mut masked = ex.masked_positions.clone();
        masked.sort_unstable();
        if labelled != masked {
            errs.push("label positions differ from masked positions".into());
        }
        if masked.iter().any(|&p| is_separator(case.seq.token_ids[p])) {
            errs.push("a separator was masked".into());
        }
        if masked.iter().any(|&p| ex.labels[p] != case.seq.token_ids[p] as i64) {
            errs.push("a label is not the original token".into());
        }
    }
    errs
}

/// Share of `draws` segment masks landing on each piece of a four-piece sequence.
pub fn segment_selection_frequencies(draws: u64) -> Vec<f64> {
    let vocab = fuzz_vocab();
    let item = ItemDoc::new("u", [("title", "park bus"), ("keywords", "tea")]).unwrap();
    let seq = assemble_with_limit(&["clinic", "metro card"], &item, &vocab, 512).unwrap();
    assert_eq!(seq.piece_spans.len(), 4);
    let mut counts = vec![0u64; seq.piece_spans.len()];
    let base = MaskConfig::default();
    for s in 0..draws {
        let ex = apply_segment_mask(&seq, &base.with_seed(s)).unwrap();
        let first = ex.masked_positions[0];
        let piece = seq.piece_spans.iter().position(|p| p.start == first).unwrap();
        counts[piece] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

pub fn criterion_dke_invariants() -> Check {
    let vocab = fuzz_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut truncated = 0;
    while checked < 10_000 {
        let max_len = rng.gen_range(12..=512);
        let Some(case) = fuzz_case(&mut rng, &vocab, max_len) else { continue };
        if let Some(err) = dke_case_violations(&case).into_iter().next() {
            return Err(format!("sequence {checked}: {err}"));
        }
        truncated += (case.seq.truncated_pieces > 0) as usize;
        checked += 1;
    }
    let freqs = segment_selection_frequencies(1000);
    let expected = 1.0 / freqs.len() as f64;
    ensure(freqs.iter().all(|f| (f - expected).abs() <= 0.05), || {
        format!("piece frequencies {freqs:?} not within 0.05 of {expected}")
    })?;
    Ok(format!("{checked} sequences ({truncated} truncated), piece frequencies {freqs:.3?}"))
}

// ---------------------------------------------------------------- AUC

/// Fraction of (positive, negative) pairs ranked correctly, ties counted
/// half, kept as integers until the final division.
pub fn pairwise_auc(scored: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut twice: u128 = 0;
    for p in &pos {
        for n in &neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64
}

pub fn fuzz_scored(rng: &mut ChaCha8Rng, n: usize, tie_heavy: bool) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let s = if tie_heavy {
                rng.gen_range(0..4) as f64 / 4.0
            } else {
                rng.gen()
            };
            (s, rng.gen_bool(0.4))
        })
        .collect();
    v[0].1 = true;
    v[n - 1].1 = false;
    v
}

pub fn criterion_auc_oracle() -> Check {
    let hand: [(&str, Vec<(f64, bool)>, f64); 3] = [
        ("perfect", vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)], 1.0),
        ("all ties", vec![(0.5, true), (0.5, false), (0.5, true), (0.5, false)], 0.5),
        ("3 of 4 pairs", vec![(0.9, true), (0.3, true), (0.5, false), (0.1, false)], 0.75),
    ];
    for (name, scored, want) in hand {
        let got = auc_scores(&scored).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("{name}: {got} != {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    for round in 0..300 {
        let n = if round == 0 { 500 } else { rng.gen_range(2..=500) };
        let scored = fuzz_scored(&mut rng, n, round % 2 == 0);
        let got = auc_scores(&scored).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&scored);
        ensure(got == want, || format!("n={n}: rank-sum {got} vs pairwise {want}"))?;
        cases += 1;
    }
    Ok(format!("3 hand cases, {cases} fuzz inputs up to n=500, exact agreement"))
}

// ---------------------------------------------------------------- serving

pub struct ServingFixture {
    pub catalog: Catalog,
    pub vocab: Vocab,
    pub prompt: forge_core::pet::BoundPrompt,
    pub model: TrainableMlm,
    pub pairs: Vec<(String, String)>,
}

pub fn tiny_world() -> WorldConfig {
    WorldConfig {
        n_items: 60,
        n_queries: 400,
        n_clicks: 3000,
        n_categories: 4,
        concepts_per_category: 12,
        n_train: 800,
        n_valid: 100,
        n_test: 300,
        ..Default::default()
    }
}

/// A randomly initialized scorer over the tiny world and its distinct
/// clicked pairs in log order.
pub fn serving_fixture() -> ServingFixture {
    let world = generate_world(&tiny_world()).unwrap();
    let catalog: Catalog = world.items.iter().cloned().collect();
    let prompt = RelevancePrompt::default();
    let vocab = Vocab::build(vocab_texts(
        &catalog,
        world.clicks.iter().map(|c| c.query.as_str()),
        &prompt,
        &IcpTemplate::default(),
    ));
    let model = TrainableMlm::new(vocab.len(), &ModelConfig { dim: 16, ..Default::default() }).unwrap();
    let mut seen = HashSet::new();
    let pairs = world
        .clicks
        .iter()
        .map(|c| (c.query.clone(), c.item_id.clone()))
        .filter(|p| seen.insert(p.clone()))
        .collect();
    ServingFixture {
        prompt: prompt.bind(&vocab).unwrap(),
        catalog,
        vocab,
        model,
        pairs,
    }
}

pub fn meta(version: &str) -> SnapshotMeta {
    SnapshotMeta {
        version: version.into(),
        model_checkpoint_digest: "fixture".into(),
        created_at: "1970-01-01T00:00:00Z".into(),
    }
}

/// Online tier that answers a constant, so tier mix-ups are visible.
pub struct ConstScorer(pub f64);

impl OnlineScorer for ConstScorer {
    fn score(&self, _query: &str, _item_id: &str) -> Result<f64, ScoreError> {
        Ok(self.0)
    }
}

/// Replays 100 keys with the first 60 cached; returns the measured hit rate.
pub fn replay_hit_rate() -> Result<f64, String> {
    let keys: Vec<(String, String)> = (0..100).map(|i| (format!("q{i}"), format!("i{i}"))).collect();
    let snap = Snapshot::new(meta("hr"), keys[..60].iter().map(|(q, i)| (pair_key(q, i), 0.25)))
        .map_err(|e| e.to_string())?;
    let svc = RelevanceService::new(snap, Box::new(ConstScorer(0.75)));
    for (q, i) in &keys {
        let r = svc.score_with_fallback(q, i).map_err(|e| e.to_string())?;
        let cached = q[1..].parse::<usize>().unwrap() < 60;
        ensure(r.tier == if cached { Tier::Cache } else { Tier::Online }, || format!("wrong tier for {q}"))?;
    }
    svc.hit_rate().map_err(|e| e.to_string())
}

/// Four readers score continuously while the main thread performs `swaps`
/// swaps. Every snapshot stores one score per version for all keys, so a
/// score that disagrees with the reported version is a mixed read.
pub fn swap_stress(swaps: usize) -> Result<(u64, u64), String> {
    let keys: Vec<(String, String)> = (0..50).map(|i| (format!("sq{i}"), format!("si{i}"))).collect();
    let score_of = move |v: usize| v as f64 / (swaps + 1) as f64;
    let build = |v: usize| {
        Snapshot::new(meta(&format!("v{v}")), keys.iter().map(|(q, i)| (pair_key(q, i), score_of(v)))).unwrap()
    };
    let svc = Arc::new(RelevanceService::new(build(0), Box::new(ConstScorer(-1.0))));
    let done = Arc::new(AtomicBool::new(false));
    let bad = Arc::new(Mutex::new(Vec::<String>::new()));
    let readers: Vec<_> = (0..4)
        .map(|r| {
            let (svc, done, bad, keys) = (svc.clone(), done.clone(), bad.clone(), keys.clone());
            std::thread::spawn(move || {
                let mut reads = 0u64;
                let mut k = r;
                loop {
                    let finished = done.load(Ordering::SeqCst);
                    let (q, i) = &keys[k % keys.len()];
                    match svc.score_with_fallback(q, i) {
                        Ok(res) => {
                            let v: usize = res
                                .snapshot_version
                                .as_deref()
                                .and_then(|s| s[1..].parse().ok())
                                .unwrap_or(usize::MAX);
                            if res.tier != Tier::Cache || v == usize::MAX || res.score != score_of(v) {
                                bad.lock().unwrap().push(format!("{res:?}"));
                            }
                        }
                        Err(e) => bad.lock().unwrap().push(e.to_string()),
                    }
                    reads += 1;
                    k += 1;
                    if finished {
                        return reads;
                    }
                }
            })
        })
        .collect();
    for v in 1..=swaps {
        let ack = svc.swap_snapshot(build(v));
        ensure(ack.current == format!("v{v}") && ack.previous == format!("v{}", v - 1), || {
            format!("unexpected ack {ack:?}")
        })?;
        std::thread::sleep(Duration::from_micros(200));
    }
    done.store(true, Ordering::SeqCst);
    let reads: u64 = readers.into_iter().map(|h| h.join().unwrap()).sum();
    let bad = bad.lock().unwrap();
    ensure(bad.is_empty(), || format!("{} inconsistent reads, first {}", bad.len(), bad[0]))?;
    Ok((reads, swaps as u64))
}

pub fn criterion_serving() -> Check {
    let fx = serving_fixture();
    let pairs: Vec<(String, String)> = fx.pairs.iter().take(400).cloned().collect();
    let (cached, fresh) = pairs.split_at(300);
    let (snap, _) = batch_score(&fx.model, &fx.prompt, &fx.vocab, &fx.catalog, cached, meta("t1"))
        .map_err(|e| e.to_string())?;
    let expected: BTreeMap<&(String, String), f64> = cached
        .iter()
        .map(|p| {
            let item = fx.catalog.get(&p.1).unwrap();
            (p, relevance_score(&fx.model, &fx.prompt, &fx.vocab, &p.0, item).unwrap().score)
        })
        .collect();
    let online = forge_core::serving::ModelScorer {
        model: fx.model.clone(),
        prompt: fx.prompt.clone(),
        vocab: fx.vocab.clone(),
        catalog: fx.catalog.clone(),
    };
    let svc = RelevanceService::new(snap, Box::new(online));
    for p in cached {
        let r = svc.score_with_fallback(&p.0, &p.1).map_err(|e| e.to_string())?;
        ensure(r.tier == Tier::Cache && r.snapshot_version.as_deref() == Some("t1"), || {
            format!("cached pair {p:?} served as {r:?}")
        })?;
        ensure(r.score.to_bits() == expected[p].to_bits(), || format!("score drift for {p:?}"))?;
    }
    for p in fresh {
        let r = svc.score_with_fallback(&p.0, &p.1).map_err(|e| e.to_string())?;
        ensure(r.tier == Tier::Online && r.snapshot_version.is_none(), || {
            format!("uncached pair {p:?} served as {r:?}")
        })?;
    }
    let (reads, swaps) = swap_stress(100)?;
    let rate = replay_hit_rate()?;
    ensure(rate == 0.60, || format!("hit rate {rate}"))?;
    Ok(format!(
        "{} bit-identical hits, {} online misses, {reads} reads across {swaps} swaps, hit_rate {rate:.2}",
        cached.len(),
        fresh.len()
    ))
}

// ---------------------------------------------------------------- RCD

/// Passes calls through and records every prompt.
pub struct Recorder {
    pub inner: MockTeacher,
    pub prompts: Mutex<Vec<String>>,
}

impl TeacherClient for Recorder {
    fn complete(&self, prompt: &str) -> Result<String, TeacherError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        self.inner.complete(prompt)
    }
}

pub fn rcd_catalog(n: usize) -> Catalog {
    let world = generate_world(&tiny_world()).unwrap();
    world.items.into_iter().take(n).collect()
}

/// Items whose teacher calls cannot all succeed within `max_retries`
/// retries under `teacher`'s injected failures, found by replaying each
/// item's prompts against a failure-free teacher.
pub fn unrecoverable_items(catalog: &Catalog, teacher: &MockTeacher, cfg: &RcdConfig) -> BTreeSet<String> {
    let prompts = RcdPromptSet::default();
    let mut out = BTreeSet::new();
    for item in catalog.iter() {
        let rec = Recorder {
            inner: MockTeacher::new(teacher.seed),
            prompts: Mutex::new(Vec::new()),
        };
        let _ = generate(&rec, item, &prompts, cfg, None);
        let seen = rec.prompts.into_inner().unwrap();
        if seen
            .iter()
            .any(|p| (0..=cfg.client.max_retries).all(|a| teacher.fails_on(p, a)))
        {
            out.insert(item.item_id.clone());
        }
    }
    out
}

pub fn criterion_rcd_resilience() -> Check {
    let catalog = rcd_catalog(60);
    let mut cfg = RcdConfig::default();
    cfg.client.max_retries = 1;
    cfg.client.backoff = Duration::ZERO;
    let encoder = HashedNgramEncoder::default();
    let prompts = RcdPromptSet::default();

    let clean = run_rcd(&catalog, &MockTeacher::new(7), &prompts, &cfg, None, &encoder)
        .map_err(|e| e.to_string())?;
    let invalid: BTreeSet<String> = clean.failures.iter().map(|f| f.item_id.clone()).collect();

    let teacher = MockTeacher::with_failures(7, 0.2, 0.0);
    let exhausted = unrecoverable_items(&catalog, &teacher, &cfg);
    ensure(!exhausted.is_empty(), || "no item exhausts its retries; fixture too easy".into())?;
    let run = run_rcd(&catalog, &teacher, &prompts, &cfg, None, &encoder).map_err(|e| e.to_string())?;

    let expected_failed: BTreeSet<String> = exhausted.union(&invalid).cloned().collect();
    let failed: BTreeSet<String> = run.failures.iter().map(|f| f.item_id.clone()).collect();
    ensure(failed == expected_failed, || {
        format!("failure report {failed:?}, expected {expected_failed:?}")
    })?;
    ensure(run.failures.len() == failed.len(), || "an item is reported twice".into())?;
    for f in &run.failures {
        if exhausted.contains(&f.item_id) {
            ensure(f.reason == RcdFailureReason::RetriesExhausted, || {
                format!("{} failed with {:?}", f.item_id, f.reason)
            })?;
        }
    }
    let accepted: BTreeSet<String> = run.accepted.iter().cloned().collect();
    let recoverable: BTreeSet<String> = catalog
        .iter()
        .map(|i| i.item_id.clone())
        .filter(|id| !expected_failed.contains(id))
        .collect();
    ensure(accepted == recoverable, || "accepted set differs from recoverable items".into())?;
    ensure(run.instances.len() == 2 * accepted.len(), || "missing instances".into())?;
    Ok(format!(
        "{} items: {} accepted, {} exhausted retries, {} failed validation",
        catalog.len(),
        accepted.len(),
        exhausted.len(),
        invalid.len()
    ))
}
