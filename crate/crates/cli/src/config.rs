//! Run configuration: one section per subcommand, read from JSON or TOML and
//! overlaid with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use corelens::distiller::{ProjectionMethod, DEFAULT_DROP_TOLERANCE};
use corelens::promptcraft::{toy_corpus, InversionConfig};
use corelens::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const COMMANDS: [&str; 10] = [
    "gen-synth",
    "split",
    "probe-train",
    "distill",
    "eval",
    "compare",
    "sweep",
    "audit",
    "invert",
    "invert-grid",
];

/// Loads the section for `command` from `path` (empty when absent).
pub fn load_section(path: Option<&Path>, command: &str) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = if path.extension().is_some_and(|e| e == "toml") {
        let parsed: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(parsed)?
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    let Value::Object(mut sections) = doc else {
        return Err(Error::Config(format!("{}: top level must be a table", path.display())));
    };
    if let Some(unknown) = sections.keys().find(|k| !COMMANDS.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "{}: unknown section `{unknown}` (expected one of {})",
            path.display(),
            COMMANDS.join(", ")
        )));
    }
    Ok(sections.remove(command).unwrap_or_else(|| Value::Object(Map::new())))
}

/// Recursively merges `top` into `base`; objects merge, everything else
/// replaces.
pub fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                overlay(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Drops `null` leaves and empty objects left behind by unset flags.
pub fn prune(value: Value) -> Option<Value> {
    match value {
        Value::Null => None,
        Value::Object(m) => {
            let m: Map<String, Value> = m.into_iter().filter_map(|(k, v)| prune(v).map(|v| (k, v))).collect();
            (!m.is_empty()).then_some(Value::Object(m))
        }
        v => Some(v),
    }
}

pub fn resolve<T: DeserializeOwned>(command: &str, section: Value) -> Result<T> {
    serde_json::from_value(section).map_err(|e| Error::Config(format!("[{command}] {e}")))
}

pub fn require_file(field: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {} does not exist", path.display())))
    }
}

fn default_group_counts() -> [usize; 4] {
    [900, 100, 100, 900]
}
fn default_dim() -> usize {
    64
}
fn one() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    0.5
}
fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}
fn default_drop_tolerance() -> f64 {
    DEFAULT_DROP_TOLERANCE
}
fn default_words() -> Vec<String> {
    toy_corpus()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSynth {
    pub out: PathBuf,
    #[serde(default = "default_group_counts")]
    pub group_counts: [usize; 4],
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "one")]
    pub beta_core: f64,
    #[serde(default = "one")]
    pub beta_spur: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Dfr,
    Zeroshot,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTrain {
    pub method: Method,
    pub out: PathBuf,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Class text embeddings, one row per class, for zero-shot probes.
    pub prompts: Option<PathBuf>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub plateau_factor: Option<f64>,
    pub plateau_patience: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DistillMethod {
    Gram,
    Orthonormal,
}

impl From<DistillMethod> for ProjectionMethod {
    fn from(m: DistillMethod) -> Self {
        match m {
            DistillMethod::Gram => ProjectionMethod::Gram,
            DistillMethod::Orthonormal => ProjectionMethod::Orthonormal,
        }
    }
}

fn default_distill_method() -> DistillMethod {
    DistillMethod::Gram
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distill {
    pub input: PathBuf,
    pub background: PathBuf,
    pub out: PathBuf,
    pub num_vectors: Option<usize>,
    #[serde(default = "default_distill_method")]
    pub method: DistillMethod,
    #[serde(default = "default_drop_tolerance")]
    pub drop_tolerance: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eval {
    pub probe: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Compare {
    pub before: PathBuf,
    pub after: PathBuf,
    pub out: PathBuf,
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub task: String,
    pub report: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub reports: Vec<SweepEntry>,
    pub out: PathBuf,
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Audit {
    pub query: PathBuf,
    #[serde(default)]
    pub query_row: usize,
    pub images: PathBuf,
    pub out: PathBuf,
    pub similarities_out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invert {
    pub encoder_seed: u64,
    pub initial_text: String,
    pub target_text: Option<String>,
    pub target_vector: Option<PathBuf>,
    #[serde(default)]
    pub target_row: usize,
    #[serde(default)]
    pub inversion: InversionConfig,
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertGrid {
    pub encoder_seed: u64,
    #[serde(default = "default_words")]
    pub words: Vec<String>,
    #[serde(default)]
    pub inversion: InversionConfig,
    pub out: PathBuf,
    pub runs_out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_nested_config() {
        let mut base = json!({"seed": 1, "inversion": {"lambda": 0.5, "max_iter": 10}});
        let flags = prune(json!({"seed": null, "inversion": {"lambda": 2.0, "eot_index": null}})).unwrap();
        overlay(&mut base, flags);
        assert_eq!(base, json!({"seed": 1, "inversion": {"lambda": 2.0, "max_iter": 10}}));
    }

    #[test]
    fn unknown_and_missing_fields_are_config_errors() {
        let err = resolve::<Split>("split", json!({"input": "a", "out_dir": "b", "seed": 1, "sede": 2})).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err = resolve::<GenSynth>("gen-synth", json!({"out": "x.emb"})).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert_eq!(err.kind(), corelens::ErrorKind::Config);
    }
}
