//! Subcommand bodies. Each reads its inputs, stages every output and
//! commits only once the stage has succeeded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Deserialize;
use serde_json::json;

use forge_core::config::{load_keyed, RunConfig};
use forge_core::corpus::{
    parse_click_log, parse_item_catalog, parse_labeled_triples, write_clicks, write_items,
    write_triples, Catalog, ClickRecord, LabeledTriple, LineError,
};
use forge_core::dke::{emit_dke_examples, read_dke, write_dke, JointSequence, MAX_SEQ_LEN};
use forge_core::embed::HashedNgramEncoder;
use forge_core::icp::{build_icp_instances, build_mappings, write_icp, DirectionFilter, IcpInstance};
use forge_core::metrics::evaluate;
use forge_core::mlm::{Checkpoint, TrainableMlm};
use forge_core::pet::fine_tune;
use forge_core::pretrain::{
    format_table, ordering_holds, pretrain, run_ablation, score_triples, vocab_texts, AblationConfig,
    PretrainData,
};
use forge_core::rcd::{run_rcd, write_rcd, HttpTeacher, MockTeacher, RcdInstance, ResponseCache, TeacherClient};
use forge_core::serving::{batch_score, top_pairs_by_clicks, SnapshotMeta};
use forge_core::synth::{generate_world, WorldConfig};
use forge_core::vocab::Vocab;

use crate::runlog::{CliError, CliResult, RunLog, Staged};

/// Resolved config plus the per-run plumbing every stage needs.
pub struct Ctx {
    pub cfg: RunConfig,
    pub log: RunLog,
    pub staged: Staged,
}

impl Ctx {
    pub fn new(cfg: RunConfig, log: RunLog) -> Self {
        let staged = Staged::new(log.command(), cfg.digest(), cfg.seed);
        Self { cfg, log, staged }
    }

    /// Checks that an input exists and records its digest.
    pub fn input(&mut self, name: &str, path: &str) -> CliResult<PathBuf> {
        let path = require(path)?;
        self.staged.input(name, &path)?;
        Ok(path)
    }

    pub fn commit(self) -> CliResult {
        self.staged.commit(&self.log)?;
        self.log.event("done", json!({}));
        Ok(())
    }
}

pub fn require(path: impl AsRef<Path>) -> CliResult<PathBuf> {
    let path = path.as_ref();
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Input(format!("missing input file: {}", path.display())))
    }
}

fn report_line_errors(log: &RunLog, what: &str, lines: usize, errors: &[LineError]) {
    if !errors.is_empty() {
        let sample: Vec<String> = errors.iter().take(5).map(|e| e.to_string()).collect();
        log.warn(
            "skipped_records",
            json!({ "input": what, "lines": lines, "skipped": errors.len(), "sample": sample }),
        );
    }
}

pub fn read_catalog(log: &RunLog, path: &Path) -> CliResult<Catalog> {
    let parsed = parse_item_catalog(forge_core::io::open(path)?)?;
    report_line_errors(log, "items", parsed.lines, &parsed.errors);
    if parsed.catalog.is_empty() {
        return Err(anyhow!("no usable items in {}", path.display()).into());
    }
    Ok(parsed.catalog)
}

fn read_clicks(log: &RunLog, path: &Path) -> CliResult<Vec<ClickRecord>> {
    let parsed = parse_click_log(forge_core::io::open(path)?)?;
    report_line_errors(log, "clicks", parsed.lines, &parsed.errors);
    Ok(parsed.records)
}

fn read_triples(log: &RunLog, path: &Path) -> CliResult<Vec<LabeledTriple>> {
    let parsed = parse_labeled_triples(forge_core::io::open(path)?)?;
    report_line_errors(log, "triples", parsed.lines, &parsed.errors);
    if parsed.records.is_empty() {
        return Err(anyhow!("no usable triples in {}", path.display()).into());
    }
    Ok(parsed.records)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
                .map_err(CliError::from)
        })
        .collect()
}

fn buffer(fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    Ok(buf)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display())).map_err(Into::into)
}

pub fn synth(world: WorldConfig, out_dir: &Path, log: RunLog) -> CliResult {
    world.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let digest = forge_core::io::sha256_hex(&serde_json::to_vec(&world)?);
    log.event("config", json!({ "config": &world, "config_digest": &digest }));
    let w = generate_world(&world)?;
    let mut staged = Staged::new(log.command(), digest, world.seed);
    staged.add(out_dir.join("items.jsonl"), buffer(|b| write_items(b, &w.items))?);
    staged.add(out_dir.join("clicks.jsonl"), buffer(|b| write_clicks(b, &w.clicks))?);
    staged.add(out_dir.join("train.jsonl"), buffer(|b| write_triples(b, &w.train))?);
    staged.add(out_dir.join("valid.jsonl"), buffer(|b| write_triples(b, &w.valid))?);
    staged.add(out_dir.join("test.jsonl"), buffer(|b| write_triples(b, &w.test))?);
    staged.add_json(out_dir.join("lexicon.json"), &w.lexicon);
    log.event(
        "world",
        json!({
            "items": w.items.len(), "clicks": w.clicks.len(),
            "train": w.train.len(), "valid": w.valid.len(), "test": w.test.len(),
        }),
    );
    staged.commit(&log)?;
    log.event("done", json!({}));
    Ok(())
}

pub fn icp(mut ctx: Ctx, directions: DirectionFilter) -> CliResult {
    let clicks_path = ctx.input("clicks", &ctx.cfg.clicks.clone())?;
    let items_path = ctx.input("items", &ctx.cfg.items.clone())?;
    let clicks = read_clicks(&ctx.log, &clicks_path)?;
    let catalog = read_catalog(&ctx.log, &items_path)?;
    let encoder = HashedNgramEncoder::new(ctx.cfg.embedder())?;
    let build = build_icp_instances(
        &clicks,
        &catalog,
        &ctx.cfg.screen(),
        &ctx.cfg.icp_template(),
        &encoder,
        directions,
    )?;
    ctx.log.event("icp_stats", json!({ "stats": &build.stats }));
    let bytes = buffer(|b| write_icp(b, &build.instances))?;
    ctx.staged.add(&ctx.cfg.icp_out, bytes);
    ctx.commit()
}

pub fn dke(mut ctx: Ctx) -> CliResult {
    let items_path = ctx.input("items", &ctx.cfg.items.clone())?;
    let clicks_path = ctx.input("clicks", &ctx.cfg.clicks.clone())?;
    let catalog = read_catalog(&ctx.log, &items_path)?;
    let clicks = read_clicks(&ctx.log, &clicks_path)?;
    let vocab = Vocab::build(vocab_texts(
        &catalog,
        clicks.iter().map(|c| c.query.as_str()),
        &ctx.cfg.relevance_prompt(),
        &ctx.cfg.icp_template(),
    ));
    let mappings = build_mappings(&clicks);
    let build = emit_dke_examples(
        &catalog,
        &mappings.i2q,
        ctx.cfg.k,
        &ctx.cfg.mask(),
        &vocab,
        ctx.cfg.dke_epochs,
    )?;
    ctx.log.event(
        "dke_stats",
        json!({
            "records": build.records.len(), "item_only": build.item_only,
            "truncated_items": build.truncated_items, "vocab_size": vocab.len(),
        }),
    );
    let bytes = buffer(|b| write_dke(b, &build.records))?;
    ctx.staged.add(&ctx.cfg.dke_out, bytes);
    ctx.staged.add(&ctx.cfg.vocab, vocab.to_bytes()?);
    ctx.commit()
}

pub fn failures_path(out: &str) -> PathBuf {
    Path::new(out).with_extension("failures.json")
}

pub fn rcd(mut ctx: Ctx, use_cache: bool) -> CliResult {
    let items_path = ctx.input("items", &ctx.cfg.items.clone())?;
    let catalog = read_catalog(&ctx.log, &items_path)?;
    let rcd_cfg = ctx.cfg.rcd();
    let teacher: Box<dyn TeacherClient> = if ctx.cfg.teacher == "mock" {
        Box::new(MockTeacher::with_failures(ctx.cfg.seed, ctx.cfg.mock_failure_rate, 0.0))
    } else {
        Box::new(HttpTeacher::new(&rcd_cfg.client)?)
    };
    let cache = if use_cache {
        Some(ResponseCache::new(&ctx.cfg.rcd_cache)?)
    } else {
        None
    };
    let encoder = HashedNgramEncoder::new(ctx.cfg.embedder())?;
    let run = run_rcd(&catalog, teacher.as_ref(), &ctx.cfg.rcd_prompts(), &rcd_cfg, cache.as_ref(), &encoder)?;
    ctx.log.event(
        "rcd_stats",
        json!({
            "items": catalog.len(), "accepted": run.accepted.len(), "failed": run.failures.len(),
            "instances": run.instances.len(), "teacher_attempts": run.teacher_attempts,
            "cache_hits": run.cache_hits, "failure_counts": run.failure_counts(),
        }),
    );
    let report = json!({
        "items": catalog.len(),
        "accepted": run.accepted.len(),
        "failure_counts": run.failure_counts(),
        "failures": &run.failures,
    });
    let bytes = buffer(|b| write_rcd(b, &run.instances))?;
    ctx.staged.add(&ctx.cfg.rcd_out, bytes);
    ctx.staged.add_json(failures_path(&ctx.cfg.rcd_out), &report);
    ctx.commit()
}

/// Which pretraining sources were named on the command line.
pub struct Sources {
    pub dke: bool,
    pub icp: bool,
    pub rcd: bool,
}

pub fn pretrain_cmd(mut ctx: Ctx, sources: Sources) -> CliResult {
    let Sources { mut dke, mut icp, mut rcd } = sources;
    if !(dke || icp || rcd) {
        (dke, icp, rcd) = (true, true, true);
    }
    let vocab_path = ctx.input("vocab", &ctx.cfg.vocab.clone())?;
    let base = Vocab::load(&vocab_path)?;
    let mut data = PretrainData::default();
    if dke {
        let path = ctx.input("dke", &ctx.cfg.dke_out.clone())?;
        data.dke = read_dke(forge_core::io::open(&path)?)?;
    }
    let mut texts: Vec<String> = Vec::new();
    if icp {
        let path = ctx.input("icp", &ctx.cfg.icp_out.clone())?;
        texts.extend(read_jsonl::<IcpInstance>(&path)?.into_iter().map(|i| i.text));
    }
    if rcd {
        let path = ctx.input("rcd", &ctx.cfg.rcd_out.clone())?;
        texts.extend(read_jsonl::<RcdInstance>(&path)?.into_iter().map(|i| i.text));
    }
    // New words from ICP and RCD text get fresh ids after the DKE vocabulary.
    let vocab = base.extend_with(&texts);
    if let Some(bad) = data.dke.iter().flat_map(|r| r.token.original_ids()).find(|&id| id as usize >= base.len()) {
        return Err(anyhow!("dke token id {bad} outside the {}-token vocabulary", base.len()).into());
    }
    data.texts = texts
        .iter()
        .map(|t| JointSequence::single_segment(&vocab, t, MAX_SEQ_LEN))
        .collect();
    if data.is_empty() {
        return Err(anyhow!("no pretraining examples in the selected inputs").into());
    }
    let mut model = TrainableMlm::new(vocab.len(), &ctx.cfg.model_config())?;
    let report = pretrain(&mut model, &data, &ctx.cfg.pretrain())?;
    ctx.log.event(
        "pretrain_stats",
        json!({
            "dke_records": data.dke.len(), "texts": data.texts.len(),
            "vocab_size": vocab.len(), "report": report,
        }),
    );
    let ckpt = Checkpoint { model, vocab };
    ctx.staged.add(&ctx.cfg.model, ckpt.to_bytes()?);
    ctx.commit()
}

pub fn sft(mut ctx: Ctx) -> CliResult {
    let model_path = ctx.input("model", &ctx.cfg.model.clone())?;
    let triples_path = ctx.input("triples", &ctx.cfg.train.clone())?;
    let items_path = ctx.input("items", &ctx.cfg.items.clone())?;
    let Checkpoint { mut model, vocab } = load_checkpoint(&model_path)?;
    let triples = read_triples(&ctx.log, &triples_path)?;
    let catalog = read_catalog(&ctx.log, &items_path)?;
    let prompt = ctx.cfg.relevance_prompt().bind(&vocab)?;
    let report = fine_tune(&mut model, &triples, &catalog, &prompt, &vocab, &ctx.cfg.sft())?;
    ctx.log.event(
        "sft_stats",
        json!({
            "triples": triples.len(), "steps": report.steps, "skipped": report.skipped,
            "final_epoch_loss": report.final_epoch_loss,
        }),
    );
    let ckpt = Checkpoint { model, vocab };
    ctx.staged.add(&ctx.cfg.sft_model, ckpt.to_bytes()?);
    ctx.commit()
}

pub fn eval(mut ctx: Ctx) -> CliResult {
    let model_path = ctx.input("model", &ctx.cfg.sft_model.clone())?;
    let triples_path = ctx.input("triples", &ctx.cfg.test.clone())?;
    let items_path = ctx.input("items", &ctx.cfg.items.clone())?;
    let ckpt = load_checkpoint(&model_path)?;
    let triples = read_triples(&ctx.log, &triples_path)?;
    let catalog = read_catalog(&ctx.log, &items_path)?;
    let prompt = ctx.cfg.relevance_prompt().bind(&ckpt.vocab)?;
    let records = score_triples(&ckpt.model, &prompt, &ckpt.vocab, &catalog, &triples)?;
    if records.len() < triples.len() {
        ctx.log.warn("unscored_triples", json!({ "skipped": triples.len() - records.len() }));
    }
    let report = evaluate(&records, &ctx.cfg.bucket_edges)?;
    ctx.log.event("eval", json!({ "acc": report.acc, "f1": report.f1, "auc": report.auc }));
    ctx.staged.add_json(&ctx.cfg.report, &report);
    ctx.commit()
}

#[derive(Deserialize)]
struct PairLine {
    query: String,
    item_id: String,
    #[serde(default)]
    clicks: Option<u64>,
}

/// Reads scoring pairs. Lines carrying `clicks` (a click log) are ranked and
/// cut to the `top_pairs` most clicked; plain pairs are taken as given.
fn read_pairs(path: &Path, top: usize) -> CliResult<Vec<(String, String)>> {
    let lines: Vec<PairLine> = read_jsonl(path)?;
    if lines.iter().any(|l| l.clicks.is_some()) {
        let clicks: Vec<ClickRecord> = lines
            .into_iter()
            .map(|l| ClickRecord { query: l.query, item_id: l.item_id, clicks: l.clicks.unwrap_or(0) })
            .collect();
        return Ok(top_pairs_by_clicks(&clicks, top));
    }
    Ok(lines.into_iter().map(|l| (l.query, l.item_id)).collect())
}

pub fn snapshot(mut ctx: Ctx, version: Option<String>) -> CliResult {
    let model_path = ctx.input("model", &ctx.cfg.sft_model.clone())?;
    let pairs_path = ctx.input("pairs", &ctx.cfg.pairs.clone())?;
    let items_path = ctx.input("items", &ctx.cfg.items.clone())?;
    let ckpt_digest = forge_core::io::file_digest(&model_path)?;
    let ckpt = load_checkpoint(&model_path)?;
    let catalog = read_catalog(&ctx.log, &items_path)?;
    let pairs = read_pairs(&pairs_path, ctx.cfg.top_pairs)?;
    let prompt = ctx.cfg.relevance_prompt().bind(&ckpt.vocab)?;
    let version = version.unwrap_or_else(|| {
        Path::new(&ctx.cfg.snapshot)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "snapshot".into())
    });
    let meta = SnapshotMeta {
        version,
        model_checkpoint_digest: ckpt_digest,
        created_at: crate::runlog::created_at(),
    };
    let (snap, stats) = batch_score(&ckpt.model, &prompt, &ckpt.vocab, &catalog, &pairs, meta)?;
    ctx.log.event(
        "snapshot_stats",
        json!({ "entries": snap.len(), "version": snap.version(), "stats": stats }),
    );
    ctx.staged.add(&ctx.cfg.snapshot, snap.to_bytes()?);
    ctx.commit()
}

/// Built-in world sizes for `ablate`.
pub fn world_preset(name: &str) -> Option<WorldConfig> {
    match name {
        "small" | "default" => Some(WorldConfig::default()),
        "tiny" => Some(WorldConfig {
            n_items: 60,
            n_queries: 400,
            n_clicks: 3000,
            n_categories: 4,
            concepts_per_category: 12,
            n_train: 800,
            n_valid: 100,
            n_test: 300,
            ..WorldConfig::default()
        }),
        _ => None,
    }
}

pub fn resolve_world(name: &str, seed_flag: Option<u64>) -> CliResult<WorldConfig> {
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(s) = seed_flag {
        flags.push(("seed", s.to_string()));
    }
    if let Some(mut w) = world_preset(name) {
        if let Some(s) = seed_flag {
            w.seed = s;
        }
        return Ok(w);
    }
    let path = require(name)?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    load_keyed(&text, Vec::new(), flags).map_err(|e| CliError::Input(e.to_string()))
}

pub fn ablate(world: WorldConfig, seeds: &[u64], out: Option<&Path>, check: bool, log: RunLog) -> CliResult {
    let base = AblationConfig {
        world,
        ..AblationConfig::default()
    };
    let digest = forge_core::io::sha256_hex(&serde_json::to_vec(&base)?);
    log.event("config", json!({ "config": &base, "config_digest": &digest, "seeds": seeds }));
    let mut all = Vec::new();
    let mut every_ok = true;
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.world.seed = seed;
        let started = std::time::Instant::now();
        let rows = run_ablation(&cfg)?;
        let ok = ordering_holds(&rows);
        every_ok &= ok;
        println!("seed {seed}");
        print!("{}", format_table(&rows));
        println!("ordering {}", if ok { "holds" } else { "violated" });
        log.event("ablation_seed", json!({ "seed": seed, "ordering_holds": ok, "secs": started.elapsed().as_secs_f64() }));
        all.push(json!({ "seed": seed, "ordering_holds": ok, "rows": rows }));
    }
    if let Some(path) = out {
        let mut staged = Staged::new(log.command(), digest, base.world.seed);
        let body: BTreeMap<&str, serde_json::Value> =
            [("seeds", json!(seeds)), ("results", json!(all))].into_iter().collect();
        staged.add_json(path, &body);
        staged.commit(&log)?;
    }
    if check && !every_ok {
        return Err(anyhow!("ablation ordering violated on at least one seed").into());
    }
    log.event("done", json!({}));
    Ok(())
}
