//! Stamped, atomically written outputs.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use corelens::digest::json_digest;
use corelens::embstore::write_atomic;
use corelens::{Error, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

/// Identity of one resolved invocation.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub command: &'static str,
    pub digest: String,
    pub seed: Option<u64>,
}

impl Stamp {
    pub fn new<T: Serialize>(command: &'static str, config: &T, seed: Option<u64>) -> Result<Self> {
        let digest = json_digest(&json!({ "command": command, "config": serde_json::to_value(config)? }));
        Ok(Self { command, digest, seed })
    }

    /// Provenance block for EMB1 sidecars; carries no timestamp.
    pub fn provenance(&self) -> Value {
        json!({ "command": self.command, "config_digest": self.digest, "seed": self.seed })
    }
}

/// Creation time in Unix seconds; `SOURCE_DATE_EPOCH` wins when set.
fn created_unix() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Writes `body` with the stamp fields added at the top level. Everything
/// time-dependent lives under `meta`.
pub fn write_json(path: &Path, stamp: &Stamp, body: Value) -> Result<()> {
    let mut doc = match body {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("result".into(), other);
            m
        }
    };
    doc.insert("command".into(), json!(stamp.command));
    doc.insert("config_digest".into(), json!(stamp.digest));
    doc.insert("seed".into(), json!(stamp.seed));
    doc.insert(
        "meta".into(),
        json!({ "created_unix": created_unix(), "tool_version": env!("CARGO_PKG_VERSION") }),
    );
    let mut bytes = serde_json::to_vec_pretty(&Value::Object(doc))?;
    bytes.push(b'\n');
    write_text(path, &bytes)
}

pub fn write_text(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, bytes)
}

pub fn read_json(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// The `key` member of a stamped artifact.
pub fn member(doc: &Value, key: &str, path: &Path) -> Result<Value> {
    doc.get(key)
        .cloned()
        .ok_or_else(|| Error::Format(format!("{}: missing `{key}`", path.display())))
}
