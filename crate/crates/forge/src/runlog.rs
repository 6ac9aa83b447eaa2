//! Line-delimited JSON run log, staged artifact writes and their sidecars.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use forge_core::io::{sha256_hex, write_atomic};

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Missing input file or unusable configuration: exit 2.
    Input(String),
    /// The stage itself failed: exit 1.
    Stage(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Stage(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Stage(_) => "stage",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => f.write_str(m),
            CliError::Stage(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Stage(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Artifact creation time; `SOURCE_DATE_EPOCH` pins it for reproducible builds.
pub fn created_at() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    pinned
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub struct RunLog {
    command: &'static str,
}

impl RunLog {
    pub fn new(command: &'static str) -> Self {
        Self { command }
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    pub fn event(&self, event: &str, fields: Value) {
        self.emit("info", event, fields);
    }

    pub fn warn(&self, event: &str, fields: Value) {
        self.emit("warn", event, fields);
    }

    pub fn error(&self, event: &str, fields: Value) {
        self.emit("error", event, fields);
    }

    fn emit(&self, level: &str, event: &str, fields: Value) {
        let mut line = json!({
            "ts": now_rfc3339(),
            "level": level,
            "command": self.command,
            "event": event,
        });
        if let (Value::Object(base), Value::Object(extra)) = (&mut line, fields) {
            base.extend(extra);
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{line}");
    }
}

/// Provenance written next to every artifact as `<artifact>.meta.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub sha256: String,
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub created_at: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Outputs held in memory until the stage succeeds, then written atomically.
/// A stage that fails before `commit` leaves nothing behind.
pub struct Staged {
    command: &'static str,
    config_digest: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn new(command: &'static str, config_digest: String, seed: u64) -> Self {
        Self {
            command,
            config_digest,
            seed,
            inputs: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    /// Records an input's digest for the sidecars.
    pub fn input(&mut self, name: &str, path: &Path) -> CliResult {
        let digest = forge_core::io::file_digest(path)?;
        self.inputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        let path = path.into();
        let meta = ArtifactMeta {
            artifact: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(&bytes),
            command: self.command.to_string(),
            config_digest: self.config_digest.clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: created_at(),
        };
        let mut meta_bytes = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        meta_bytes.push(b'\n');
        self.files.push((meta_path(&path), meta_bytes));
        self.files.push((path, bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, path: impl Into<PathBuf>, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
        bytes.push(b'\n');
        self.add(path, bytes);
    }

    pub fn commit(self, log: &RunLog) -> CliResult<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (path, bytes) in self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_atomic(&path, &bytes)?;
            if !path.to_string_lossy().ends_with(".meta.json") {
                log.event("artifact", json!({ "path": path, "bytes": bytes.len() }));
            }
            written.push(path);
        }
        Ok(written)
    }
}

/// Writes a structured error report under `temp_dir`; returns its path.
pub fn write_error_report(temp_dir: &Path, command: &str, err: &CliError) -> Option<PathBuf> {
    let report = json!({
        "command": command,
        "exit_code": err.exit_code(),
        "kind": err.kind(),
        "message": err.to_string(),
        "ts": now_rfc3339(),
    });
    let path = temp_dir.join(format!("error-{command}.json"));
    std::fs::create_dir_all(temp_dir).ok()?;
    std::fs::write(&path, serde_json::to_vec_pretty(&report).ok()?).ok()?;
    Some(path)
}
