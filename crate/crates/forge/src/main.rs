//! `forge`: build continual-pretraining data, train and evaluate the toy
//! relevance model, and serve it behind a snapshot cache.

mod commands;
mod runlog;
mod server;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use forge_core::config::{load_config_file, RunConfig};
use forge_core::icp::DirectionFilter;
use forge_core::mlm::Checkpoint;
use forge_core::serving::{ModelScorer, RelevanceService, Snapshot};

use commands::{require, Ctx, Sources};
use runlog::{write_error_report, CliError, CliResult, RunLog};

#[derive(Parser)]
#[command(name = "forge", version, about = "Search-relevance continual pretraining toolkit")]
struct Cli {
    /// TOML config file (a world config for `synth`, a run config otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog, click log and labeled splits.
    Synth {
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
        /// `small`, `tiny`, or a world TOML file; `--config` also names one.
        #[arg(long)]
        world: Option<String>,
    },
    /// Build in-context pretraining instances from the click graph.
    Icp(IcpArgs),
    /// Build masked joint query-item sequences and the vocabulary.
    Dke(DkeArgs),
    /// Distill reasoning documents from a teacher.
    Rcd(RcdArgs),
    /// Continual pretraining on any of the DKE, ICP and RCD outputs.
    Pretrain(PretrainArgs),
    /// Fine-tune on labeled triples through the relevance prompt.
    Sft(SftArgs),
    /// Score labeled triples and write acc, f1, auc and length buckets.
    Eval(EvalArgs),
    /// Batch-score pairs into an immutable snapshot file.
    Snapshot(SnapshotArgs),
    /// Serve `/score`, `/healthz`, `/metrics` and `/admin/swap`.
    Serve(ServeArgs),
    /// Ask a running server to swap in a new snapshot.
    Swap(SwapArgs),
    /// Run the six-variant ablation and print the comparison table.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct IcpArgs {
    #[arg(long)]
    clicks: Option<String>,
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    max_candidates: Option<String>,
    #[arg(long)]
    min_candidates: Option<String>,
    #[arg(long, value_enum, default_value = "both")]
    directions: Directions,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Directions {
    Both,
    Q2i,
    I2q,
}

#[derive(Args)]
struct DkeArgs {
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    clicks: Option<String>,
    #[arg(long)]
    k: Option<String>,
    /// Number of independently masked views per item.
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct RcdArgs {
    #[arg(long)]
    items: Option<String>,
    /// `mock` or a teacher endpoint URL.
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    cache: Option<String>,
    #[arg(long)]
    no_cache: bool,
    /// Transient failure rate injected into the mock teacher.
    #[arg(long)]
    failure_rate: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dke: Option<String>,
    #[arg(long)]
    icp: Option<String>,
    #[arg(long)]
    rcd: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Optimizer step cap (0 for none).
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    triples: Option<String>,
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    triples: Option<String>,
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    report: Option<String>,
}

#[derive(Args)]
struct SnapshotArgs {
    #[arg(long)]
    model: Option<String>,
    /// JSONL of {query, item_id}; a click log is cut to its top pairs.
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    top_pairs: Option<String>,
    /// Version label; defaults to the output file stem.
    #[arg(long)]
    version: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    /// Checkpoint for the online tier.
    #[arg(long)]
    online: Option<String>,
    #[arg(long)]
    snapshot: Option<String>,
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct SwapArgs {
    #[arg(long)]
    snapshot: Option<String>,
    /// Base URL of the server's admin endpoint.
    #[arg(long)]
    admin: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// `small` (the calibrated default world), `tiny`, or a world TOML file.
    #[arg(long, default_value = "small")]
    world: String,
    /// Comma-separated world seeds.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Also write the rows as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit 1 unless every seed shows the expected ordering.
    #[arg(long)]
    check: bool,
}

/// Collects `Some` flag values under their config keys.
fn pairs(entries: &[(&'static str, &Option<String>)]) -> Vec<(&'static str, String)> {
    entries
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (*k, v.clone())))
        .collect()
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Icp(_) => "icp",
            Command::Dke(_) => "dke",
            Command::Rcd(_) => "rcd",
            Command::Pretrain(_) => "pretrain",
            Command::Sft(_) => "sft",
            Command::Eval(_) => "eval",
            Command::Snapshot(_) => "snapshot",
            Command::Serve(_) => "serve",
            Command::Swap(_) => "swap",
            Command::Ablate(_) => "ablate",
        }
    }

    /// Subcommand flags as config overrides.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        match self {
            Command::Synth { .. } | Command::Ablate(_) => Vec::new(),
            Command::Icp(a) => pairs(&[
                ("clicks", &a.clicks),
                ("items", &a.items),
                ("sigma", &a.sigma),
                ("max_candidates", &a.max_candidates),
                ("min_candidates", &a.min_candidates),
                ("icp_out", &a.out),
            ]),
            Command::Dke(a) => pairs(&[
                ("items", &a.items),
                ("clicks", &a.clicks),
                ("k", &a.k),
                ("dke_epochs", &a.epochs),
                ("vocab", &a.vocab),
                ("dke_out", &a.out),
            ]),
            Command::Rcd(a) => pairs(&[
                ("items", &a.items),
                ("teacher", &a.teacher),
                ("rcd_cache", &a.cache),
                ("mock_failure_rate", &a.failure_rate),
                ("rcd_out", &a.out),
            ]),
            Command::Pretrain(a) => pairs(&[
                ("dke_out", &a.dke),
                ("icp_out", &a.icp),
                ("rcd_out", &a.rcd),
                ("vocab", &a.vocab),
                ("alpha", &a.alpha),
                ("pretrain_epochs", &a.epochs),
                ("pretrain_steps", &a.steps),
                ("model", &a.out),
            ]),
            Command::Sft(a) => pairs(&[
                ("model", &a.model),
                ("train", &a.triples),
                ("items", &a.items),
                ("sft_epochs", &a.epochs),
                ("sft_model", &a.out),
            ]),
            Command::Eval(a) => pairs(&[
                ("sft_model", &a.model),
                ("test", &a.triples),
                ("items", &a.items),
                ("report", &a.report),
            ]),
            Command::Snapshot(a) => pairs(&[
                ("sft_model", &a.model),
                ("pairs", &a.pairs),
                ("items", &a.items),
                ("top_pairs", &a.top_pairs),
                ("snapshot", &a.out),
            ]),
            Command::Serve(a) => pairs(&[
                ("sft_model", &a.online),
                ("snapshot", &a.snapshot),
                ("items", &a.items),
                ("listen", &a.listen),
            ]),
            Command::Swap(a) => pairs(&[("snapshot", &a.snapshot), ("admin", &a.admin)]),
        }
    }
}

fn global_overrides(cli: &Cli) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        out.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(s) = cli.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(j) = cli.jobs {
        out.push(("jobs".into(), j.to_string()));
    }
    Ok(out)
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    if let Some(p) = &cli.config {
        require(p)?;
    }
    let globals = global_overrides(cli)?;
    let mut flags: Vec<(&str, String)> = globals.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    flags.extend(cli.command.overrides());
    load_config_file(cli.config.as_deref(), std::env::vars(), flags).map_err(|e| CliError::Input(e.to_string()))
}

fn init_threads(jobs: usize) {
    // Only fails if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
}

fn run(cli: &Cli, log: RunLog) -> CliResult {
    if let Command::Synth { out_dir, world } = &cli.command {
        let world_name = match (world, &cli.config) {
            (Some(w), _) => w.clone(),
            (None, Some(p)) => p.to_string_lossy().into_owned(),
            (None, None) => "small".into(),
        };
        let world = commands::resolve_world(&world_name, cli.seed)?;
        init_threads(cli.jobs.unwrap_or(1));
        return commands::synth(world, out_dir, log);
    }
    if let Command::Ablate(a) = &cli.command {
        init_threads(cli.jobs.unwrap_or_else(|| RunConfig::default().jobs));
        let world = commands::resolve_world(&a.world, None)?;
        return commands::ablate(world, &a.seeds, a.out.as_deref(), a.check, log);
    }

    let cfg = resolve_config(cli)?;
    init_threads(cfg.jobs);
    log.event("config", json!({ "config": &cfg, "config_digest": cfg.digest() }));
    let ctx = Ctx::new(cfg, log);
    match &cli.command {
        Command::Icp(a) => {
            let d = match a.directions {
                Directions::Both => DirectionFilter::Both,
                Directions::Q2i => DirectionFilter::Q2i,
                Directions::I2q => DirectionFilter::I2q,
            };
            commands::icp(ctx, d)
        }
        Command::Dke(_) => commands::dke(ctx),
        Command::Rcd(a) => commands::rcd(ctx, !a.no_cache),
        Command::Pretrain(a) => commands::pretrain_cmd(
            ctx,
            Sources {
                dke: a.dke.is_some(),
                icp: a.icp.is_some(),
                rcd: a.rcd.is_some(),
            },
        ),
        Command::Sft(_) => commands::sft(ctx),
        Command::Eval(_) => commands::eval(ctx),
        Command::Snapshot(a) => commands::snapshot(ctx, a.version.clone()),
        Command::Serve(a) => serve(ctx, a.snapshot.is_some()),
        Command::Swap(_) => swap(ctx),
        Command::Synth { .. } | Command::Ablate(_) => unreachable!("handled above"),
    }
}

fn serve(ctx: Ctx, with_snapshot: bool) -> CliResult {
    let Ctx { cfg, log, .. } = ctx;
    let model_path = require(&cfg.sft_model)?;
    let items_path = require(&cfg.items)?;
    let snapshot = if with_snapshot || Path::new(&cfg.snapshot).is_file() {
        Snapshot::read(&require(&cfg.snapshot)?)?
    } else {
        log.warn("no_snapshot", json!({ "path": &cfg.snapshot }));
        Snapshot::empty("none")
    };
    let Checkpoint { model, vocab } = Checkpoint::load(&model_path)?;
    let catalog = commands::read_catalog(&log, &items_path)?;
    let prompt = cfg.relevance_prompt().bind(&vocab)?;
    let scorer = ModelScorer {
        model,
        prompt,
        vocab,
        catalog,
    };
    let service = Arc::new(RelevanceService::new(snapshot, Box::new(scorer)));
    let version = service.snapshot().version().to_string();
    server::serve(service, &cfg.listen, |addr| {
        log.event("listening", json!({ "addr": addr.to_string(), "snapshot": version }));
    })?;
    log.event("done", json!({}));
    Ok(())
}

fn swap(ctx: Ctx) -> CliResult {
    let Ctx { cfg, log, .. } = ctx;
    let path = std::fs::canonicalize(require(&cfg.snapshot)?)?;
    let url = format!("{}/admin/swap", cfg.admin.trim_end_matches('/'));
    let resp = reqwest::blocking::Client::new()
        .post(&url)
        .json(&json!({ "snapshot": path }))
        .send()
        .map_err(|e| anyhow::anyhow!("admin endpoint {url}: {e}"))?;
    let status = resp.status();
    let body: serde_json::Value = resp.json().unwrap_or(serde_json::Value::Null);
    if !status.is_success() {
        return Err(anyhow::anyhow!("swap refused ({status}): {body}").into());
    }
    println!("{body}");
    log.event("swapped", json!({ "ack": body }));
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let name = cli.command.name();
    let log = RunLog::new(name);
    if let Err(err) = run(&cli, RunLog::new(name)) {
        let temp_dir = resolve_config(&cli)
            .map(|c| PathBuf::from(c.temp_dir))
            .unwrap_or_else(|_| PathBuf::from(RunConfig::default().temp_dir));
        let report = write_error_report(&temp_dir, name, &err);
        log.error(
            "failed",
            json!({ "kind": err.kind(), "exit_code": err.exit_code(), "message": err.to_string(), "report": report }),
        );
        std::process::exit(err.exit_code());
    }
}
