use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use smoe_core::data::{FramePipeline, SynthSpec};
use smoe_core::model::ModelConfig;
use smoe_core::trainer::{OptimizerConfig, TrainConfig};

use crate::CliError;

/// One training experiment as written by the user.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub preset: String,
    /// Fields replacing those of the preset's model configuration.
    #[serde(default)]
    pub model: Map<String, Value>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds both parameter initialization and batch order.
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Feature file (`.smfe`) or manifest (`.jsonl`).
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// Used when `train` is absent; the corpus is split into train and valid.
    pub synth: Option<SynthSpec>,
    /// Fraction of a synthetic corpus held out for validation.
    pub valid_fraction: f64,
    pub pipeline: FramePipeline,
    pub cmvn: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            synth: None,
            valid_fraction: 0.2,
            pipeline: FramePipeline::default(),
            cmvn: true,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.train, &self.valid, &self.synth) {
            (None, _, None) => Err(CliError::usage("data.train: missing (set data.train or data.synth)")),
            (Some(_), None, _) => Err(CliError::usage("data.valid: missing (required with data.train)")),
            (Some(t), Some(v), _) => {
                for (field, p) in [("data.train", t), ("data.valid", v)] {
                    if !p.is_file() {
                        return Err(CliError::usage(format!("{field}: no such file {}", p.display())));
                    }
                }
                Ok(())
            }
            (None, _, Some(_)) => {
                if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
                    return Err(CliError::usage(format!(
                        "data.valid_fraction: must be in (0, 1), got {}",
                        self.valid_fraction
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Fully resolved experiment, echoed into the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct Experiment {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

/// Flag values that replace fields of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub lr: Option<f64>,
    /// `dotted.path=json` assignments applied to the raw document.
    pub set: Vec<String>,
}

fn assign(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set {spec}: expected key=value")))?;
    // bare words are taken as strings
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::usage(format!("--set {path}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(CliError::usage("--set: empty key"))
}

pub fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var("SMOE_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("SMOE_SEED: expected an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Reads the config file and applies flag, environment and `--set`
/// overrides. Precedence: flags, then `SMOE_SEED`, then the file.
pub fn load_experiment(path: &Path, ov: &Overrides) -> Result<Experiment, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    for spec in &ov.set {
        assign(&mut doc, spec)?;
    }
    let file: ExperimentFile =
        serde_json::from_value(doc).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    resolve(file, ov)
}

fn resolve(file: ExperimentFile, ov: &Overrides) -> Result<Experiment, CliError> {
    let preset = ov.preset.clone().unwrap_or(file.preset);
    let base = ModelConfig::preset(&preset).map_err(|e| CliError::usage(format!("preset: {e}")))?;
    let mut model_doc = serde_json::to_value(&base).map_err(anyhow::Error::from)?;
    let obj = model_doc.as_object_mut().expect("model config is an object");
    for (k, v) in file.model {
        obj.insert(k, v);
    }
    let model: ModelConfig = serde_json::from_value(model_doc).map_err(|e| CliError::usage(format!("model: {e}")))?;
    model.validate().map_err(|e| CliError::usage(format!("model: {e}")))?;

    let seed = ov.seed.or(seed_from_env()?).unwrap_or(file.seed);
    let mut train = file.train;
    train.seed = seed;
    if let Some(e) = ov.epochs {
        train.epochs = e;
    }
    if ov.max_steps.is_some() {
        train.max_steps = ov.max_steps;
    }
    if let Some(lr) = ov.lr {
        match &mut train.optimizer {
            OptimizerConfig::Adam { lr: l, .. } | OptimizerConfig::Sgd { lr: l, .. } => *l = lr,
        }
    }
    train.validate().map_err(|e| CliError::usage(format!("train: {e}")))?;
    file.data.validate()?;
    let expected = file.data.synth.as_ref().map(|s| s.dim * file.data.pipeline.stack);
    if let Some(w) = expected {
        if w != model.input_dim {
            return Err(CliError::usage(format!(
                "data.synth.dim: {} frames stacked by {} give width {w}, model.input_dim is {}",
                w / file.data.pipeline.stack,
                file.data.pipeline.stack,
                model.input_dim
            )));
        }
    }
    Ok(Experiment {
        preset,
        model,
        train,
        data: file.data,
        output_dir: ov.output_dir.clone().unwrap_or(file.output_dir),
        seed,
    })
}

/// Short SHA-256 digest of a serializable value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
