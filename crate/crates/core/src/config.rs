//! Run configuration: flat TOML keys, `FORGE_*` environment overrides and
//! command-line overrides, applied in that order over the defaults.

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::io::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Paths.
    pub items: String,
    pub clicks: String,
    pub train: String,
    pub valid: String,
    pub test: String,
    pub vocab: String,
    pub icp_out: String,
    pub dke_out: String,
    pub rcd_out: String,
    pub rcd_cache: String,
    pub model: String,
    pub sft_model: String,
    pub report: String,
    pub pairs: String,
    pub snapshot: String,
    pub temp_dir: String,

    // Embedder.
    pub embed_dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_seed: u64,

    // ICP.
    pub sigma: f64,
    pub max_candidates: usize,
    pub min_candidates: usize,
    pub icp_template_q2i: String,
    pub icp_template_i2q: String,

    // DKE and masking.
    pub k: usize,
    pub token_mask_rate: f64,
    pub replace_mask_prob: f64,
    pub replace_random_prob: f64,
    pub keep_prob: f64,
    pub dke_epochs: usize,

    // Model and training.
    pub alpha: f64,
    pub dim: usize,
    pub init_scale: f64,
    pub optimizer: String,
    pub pretrain_epochs: usize,
    /// Optimizer step cap for pretraining; 0 means no cap.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub batch_size: usize,
    pub sft_batch_size: usize,
    pub pet_template: String,
    pub verbalizer_no: String,
    pub verbalizer_yes: String,

    // RCD.
    pub teacher: String,
    pub rcd_prompt1: String,
    pub rcd_prompt2: String,
    pub rcd_prompt3: String,
    pub rcd_n_queries: usize,
    pub sigma_rcd: f64,
    pub teacher_timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub mock_failure_rate: f64,

    // Evaluation and serving.
    pub bucket_edges: Vec<usize>,
    pub top_pairs: usize,
    pub listen: String,
    pub admin: String,

    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let icp = crate::icp::IcpTemplate::default();
        let pet = crate::pet::RelevancePrompt::default();
        let rcd = crate::rcd::RcdPromptSet::default();
        let mask = crate::dke::MaskConfig::default();
        Self {
            items: "data/items.jsonl".into(),
            clicks: "data/clicks.jsonl".into(),
            train: "data/train.jsonl".into(),
            valid: "data/valid.jsonl".into(),
            test: "data/test.jsonl".into(),
            vocab: "out/vocab.json".into(),
            icp_out: "out/icp.jsonl".into(),
            dke_out: "out/dke.jsonl".into(),
            rcd_out: "out/rcd.jsonl".into(),
            rcd_cache: "out/rcd_cache".into(),
            model: "out/model.ckpt".into(),
            sft_model: "out/model_sft.ckpt".into(),
            report: "out/report.json".into(),
            pairs: "out/pairs.jsonl".into(),
            snapshot: "out/snapshot.bin".into(),
            temp_dir: "out/tmp".into(),
            embed_dim: 768,
            ngram_min: 1,
            ngram_max: 3,
            hash_seed: 0,
            sigma: 0.35,
            max_candidates: 10,
            min_candidates: 2,
            icp_template_q2i: icp.q2i,
            icp_template_i2q: icp.i2q,
            k: 5,
            token_mask_rate: mask.token_mask_rate,
            replace_mask_prob: mask.replace_mask_prob,
            replace_random_prob: mask.replace_random_prob,
            keep_prob: mask.keep_prob,
            dke_epochs: 1,
            alpha: 0.7,
            dim: 32,
            init_scale: 0.5,
            optimizer: "adam".into(),
            pretrain_epochs: 20,
            pretrain_steps: 0,
            pretrain_lr: 0.01,
            sft_epochs: 10,
            sft_lr: 0.005,
            batch_size: 16,
            sft_batch_size: 8,
            pet_template: pet.template,
            verbalizer_no: pet.verbalizers.0,
            verbalizer_yes: pet.verbalizers.1,
            teacher: "mock".into(),
            rcd_prompt1: rcd.prompt1,
            rcd_prompt2: rcd.prompt2,
            rcd_prompt3: rcd.prompt3,
            rcd_n_queries: 3,
            sigma_rcd: 0.2,
            teacher_timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 1000,
            mock_failure_rate: 0.0,
            bucket_edges: crate::metrics::DEFAULT_BUCKET_EDGES.to_vec(),
            top_pairs: 1000,
            listen: "127.0.0.1:8080".into(),
            admin: "http://127.0.0.1:8080".into(),
            seed: 42,
            jobs: 4,
        }
    }
}

fn defaults_table<T: Serialize + Default>() -> toml::Table {
    match Value::try_from(T::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerces `given` to the type of `default`; integers widen to floats.
fn check_type(key: &str, default: &Value, given: Value) -> Result<Value> {
    match (default, given) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(_), Value::Array(items)) => {
            if let Some(bad) = items.iter().find(|v| !matches!(v, Value::Integer(_))) {
                return Err(Error::Config(format!(
                    "key `{key}`: expected array of integers, found {} element",
                    type_name(bad)
                )));
            }
            Ok(Value::Array(items))
        }
        (d, g) if std::mem::discriminant(d) == std::mem::discriminant(&g) => Ok(g),
        (d, g) => Err(Error::Config(format!(
            "key `{key}`: expected {}, found {}",
            type_name(d),
            type_name(&g)
        ))),
    }
}

/// Parses a textual override by the type of the key's default.
fn parse_override(key: &str, default: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("key `{key}`: expected {what}, found {raw:?}"));
    let raw = raw.trim();
    Ok(match default {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Integer(_) => Value::Integer(raw.parse().map_err(|_| bad("integer"))?),
        Value::Float(_) => Value::Float(raw.parse().map_err(|_| bad("float"))?),
        Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|_| bad("boolean"))?),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map(Value::Integer).map_err(|_| bad("comma-separated integers")))
                .collect::<Result<_>>()?,
        ),
        _ => return Err(bad("a scalar")),
    })
}

fn nearest_key<'a>(key: &str, table: &'a toml::Table) -> Option<&'a str> {
    table
        .keys()
        .map(|k| (strsim::levenshtein(key, k), k.as_str()))
        .min()
        .map(|(_, k)| k)
}

fn unknown_key(key: &str, table: &toml::Table) -> Error {
    match nearest_key(key, table) {
        Some(near) => Error::Config(format!("unknown key `{key}`; did you mean `{near}`?")),
        None => Error::Config(format!("unknown key `{key}`")),
    }
}

/// Builds a flat keyed struct from TOML text, then `env` (`FORGE_KEY=value`
/// pairs), then `flags` (`key`, `value`) pairs, over `T::default()`.
pub fn load_keyed<'a, T>(
    toml_text: &str,
    env: impl IntoIterator<Item = (String, String)>,
    flags: impl IntoIterator<Item = (&'a str, String)>,
) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    let defaults = defaults_table::<T>();
    let mut merged = defaults.clone();
    let file: toml::Table = toml_text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {}", e.message())))?;
    for (key, value) in file {
        let default = defaults.get(&key).ok_or_else(|| unknown_key(&key, &defaults))?;
        merged.insert(key.clone(), check_type(&key, default, value)?);
    }
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("FORGE_").map(|k| (k.to_lowercase(), v)))
        .collect();
    env.sort();
    for (key, raw) in env {
        let default = defaults.get(&key).ok_or_else(|| unknown_key(&key, &defaults))?;
        merged.insert(key.clone(), parse_override(&key, default, &raw)?);
    }
    for (key, raw) in flags {
        let default = defaults.get(key).ok_or_else(|| unknown_key(key, &defaults))?;
        merged.insert(key.to_string(), parse_override(key, default, &raw)?);
    }
    Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

pub fn load_config<'a>(
    toml_text: &str,
    env: impl IntoIterator<Item = (String, String)>,
    flags: impl IntoIterator<Item = (&'a str, String)>,
) -> Result<RunConfig> {
    let cfg: RunConfig = load_keyed(toml_text, env, flags)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file<'a>(
    path: Option<&std::path::Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: impl IntoIterator<Item = (&'a str, String)>,
) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    load_config(&text, env, flags)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !matches!(self.optimizer.as_str(), "sgd" | "adam") {
            return Err(Error::Config(format!(
                "optimizer must be \"sgd\" or \"adam\", got {:?}",
                self.optimizer
            )));
        }
        if self.batch_size == 0 || self.sft_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be positive".into()));
        }
        self.screen().validate()?;
        self.mask().validate()?;
        self.embedder().validate()?;
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn embedder(&self) -> crate::embed::EmbedderConfig {
        crate::embed::EmbedderConfig {
            dimension: self.embed_dim,
            ngram_min: self.ngram_min,
            ngram_max: self.ngram_max,
            hash_seed: self.hash_seed,
        }
    }

    pub fn screen(&self) -> crate::icp::ScreenConfig {
        crate::icp::ScreenConfig {
            sigma: self.sigma,
            max_candidates: self.max_candidates,
            min_candidates: self.min_candidates,
        }
    }

    pub fn icp_template(&self) -> crate::icp::IcpTemplate {
        crate::icp::IcpTemplate {
            q2i: self.icp_template_q2i.clone(),
            i2q: self.icp_template_i2q.clone(),
        }
    }

    pub fn mask(&self) -> crate::dke::MaskConfig {
        crate::dke::MaskConfig {
            token_mask_rate: self.token_mask_rate,
            replace_mask_prob: self.replace_mask_prob,
            replace_random_prob: self.replace_random_prob,
            keep_prob: self.keep_prob,
            rng_seed: self.seed,
        }
    }

    fn optimizer_with(&self, lr: f64) -> crate::mlm::OptimizerConfig {
        match self.optimizer.as_str() {
            "adam" => crate::mlm::OptimizerConfig::Adam(crate::mlm::AdamConfig {
                lr,
                ..Default::default()
            }),
            _ => crate::mlm::OptimizerConfig::Sgd(crate::mlm::SgdConfig { lr }),
        }
    }

    pub fn model_config(&self) -> crate::mlm::ModelConfig {
        crate::mlm::ModelConfig {
            dim: self.dim,
            init_scale: self.init_scale,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn pretrain(&self) -> crate::pretrain::PretrainConfig {
        crate::pretrain::PretrainConfig {
            epochs: self.pretrain_epochs,
            max_steps: self.pretrain_steps,
            batch_size: self.batch_size,
            optimizer: self.optimizer_with(self.pretrain_lr),
            alpha: self.alpha,
            mask: self.mask(),
            seed: self.seed,
        }
    }

    pub fn sft(&self) -> crate::pet::SftConfig {
        crate::pet::SftConfig {
            epochs: self.sft_epochs,
            batch_size: self.sft_batch_size,
            optimizer: self.optimizer_with(self.sft_lr),
            seed: self.seed,
        }
    }

    pub fn relevance_prompt(&self) -> crate::pet::RelevancePrompt {
        crate::pet::RelevancePrompt {
            template: self.pet_template.clone(),
            verbalizers: (self.verbalizer_no.clone(), self.verbalizer_yes.clone()),
        }
    }

    pub fn rcd_prompts(&self) -> crate::rcd::RcdPromptSet {
        crate::rcd::RcdPromptSet {
            prompt1: self.rcd_prompt1.clone(),
            prompt2: self.rcd_prompt2.clone(),
            prompt3: self.rcd_prompt3.clone(),
        }
    }

    pub fn rcd(&self) -> crate::rcd::RcdConfig {
        crate::rcd::RcdConfig {
            n_queries: self.rcd_n_queries,
            sigma_rcd: self.sigma_rcd,
            parallelism: self.jobs,
            client: crate::rcd::TeacherClientConfig {
                endpoint: self.teacher.clone(),
                timeout: std::time::Duration::from_millis(self.teacher_timeout_ms),
                max_retries: self.max_retries,
                backoff: std::time::Duration::from_millis(self.backoff_ms),
            },
            ..Default::default()
        }
    }
}
