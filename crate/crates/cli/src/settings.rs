//! Fully resolved per-command settings.
//!
//! Resolution order: built-in defaults, then the `--config` file, then
//! explicit flags. The result is echoed as `config.json`, which is accepted
//! back by `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use inilora::approx::{DEFAULT_CONCURRENCY, DEFAULT_RANK, DEFAULT_STEPS, DEFAULT_TRAJECTORY_STRIDE};
use inilora::harness::sweep::{DistributionSetting, DEFAULT_APPROX_CHECKPOINTS, DEFAULT_SIGMAS};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsSettings {
    pub manifest: PathBuf,
    pub targets: String,
}

impl Default for StatsSettings {
    fn default() -> Self {
        StatsSettings {
            manifest: "manifest.json".into(),
            targets: "query,value".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproxSettings {
    pub manifest: PathBuf,
    pub targets: String,
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub concurrency: usize,
    pub init_mu: f64,
    pub init_sigma: Option<f64>,
    pub checkpoint_steps: Vec<usize>,
    pub trajectory_stride: usize,
    pub seed: u64,
    pub cache: Option<PathBuf>,
}

impl Default for ApproxSettings {
    fn default() -> Self {
        ApproxSettings {
            manifest: "manifest.json".into(),
            targets: "query,value".into(),
            rank: DEFAULT_RANK,
            steps: DEFAULT_STEPS,
            lr: 5e-4,
            step_size: 5000,
            gamma: 0.5,
            concurrency: DEFAULT_CONCURRENCY,
            init_mu: 0.0,
            init_sigma: None,
            checkpoint_steps: Vec::new(),
            trajectory_stride: DEFAULT_TRAJECTORY_STRIDE,
            seed: 0,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitSettings {
    pub manifest: PathBuf,
    pub layer: String,
    pub targets: String,
    pub strategy: String,
    pub alpha_sigma: Option<f64>,
    pub rank: usize,
    pub scaling: f64,
    pub keep_residual: bool,
    pub approx_steps: usize,
    pub approx_lr: f64,
    pub approx_step_size: usize,
    pub approx_gamma: f64,
    pub probe_inputs: usize,
    pub seed: u64,
    pub cache: Option<PathBuf>,
}

impl Default for InitSettings {
    fn default() -> Self {
        InitSettings {
            manifest: "manifest.json".into(),
            layer: String::new(),
            targets: "query,value".into(),
            strategy: "inilora".into(),
            alpha_sigma: None,
            rank: DEFAULT_RANK,
            scaling: 1.0,
            keep_residual: true,
            approx_steps: DEFAULT_STEPS,
            approx_lr: 5e-4,
            approx_step_size: 5000,
            approx_gamma: 0.5,
            probe_inputs: 20,
            seed: 0,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySettings {
    pub task: String,
    pub outputs: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub delta_rank: usize,
    pub delta_scale: f64,
    pub task_seed: u64,
    pub model_seed: u64,
    pub nonlinearity: String,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            task: "regression".into(),
            outputs: 8,
            n_train: 1024,
            n_eval: 256,
            delta_rank: 8,
            delta_scale: 1.0,
            task_seed: 0,
            model_seed: 0,
            nonlinearity: "tanh".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub rank: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub scaling: f64,
    pub keep_residual: bool,
    pub train_head: bool,
    pub approx_steps: usize,
    pub approx_lr: f64,
    pub approx_step_size: usize,
    pub approx_gamma: f64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            rank: DEFAULT_RANK,
            steps: 500,
            batch_size: 64,
            lr: 1e-3,
            eval_every: 50,
            scaling: 1.0,
            keep_residual: true,
            train_head: false,
            approx_steps: DEFAULT_STEPS,
            approx_lr: 5e-4,
            approx_step_size: 5000,
            approx_gamma: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(flatten)]
    pub toy: ToySettings,
    #[serde(flatten)]
    pub training: TrainingSettings,
    pub strategy: String,
    pub alpha_sigma: Option<f64>,
    pub seed: u64,
    pub cache: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            toy: ToySettings::default(),
            training: TrainingSettings::default(),
            strategy: "lora".into(),
            alpha_sigma: None,
            seed: 0,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSettings {
    #[serde(flatten)]
    pub toy: ToySettings,
    #[serde(flatten)]
    pub training: TrainingSettings,
    pub seeds: Vec<u64>,
    pub concurrency: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            toy: ToySettings::default(),
            training: TrainingSettings::default(),
            seeds: vec![0, 1, 2],
            concurrency: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepApproxSettings {
    #[serde(flatten)]
    pub sweep: SweepSettings,
    pub checkpoint_steps: Vec<usize>,
    pub cache: Option<PathBuf>,
}

impl Default for SweepApproxSettings {
    fn default() -> Self {
        SweepApproxSettings {
            sweep: SweepSettings::default(),
            checkpoint_steps: DEFAULT_APPROX_CHECKPOINTS.to_vec(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSigmaSettings {
    #[serde(flatten)]
    pub sweep: SweepSettings,
    pub sigmas: Vec<f64>,
}

impl Default for SweepSigmaSettings {
    fn default() -> Self {
        SweepSigmaSettings {
            sweep: SweepSettings::default(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepDistSettings {
    #[serde(flatten)]
    pub sweep: SweepSettings,
    pub distributions: Vec<String>,
}

impl Default for SweepDistSettings {
    fn default() -> Self {
        SweepDistSettings {
            sweep: SweepSettings::default(),
            distributions: DistributionSetting::ALL.iter().map(|d| d.label().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportSettings {
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MakeToySettings {
    pub model_id: String,
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    pub std: f64,
    pub seed: u64,
}

impl Default for MakeToySettings {
    fn default() -> Self {
        MakeToySettings {
            model_id: "toy".into(),
            layers: 8,
            rows: 64,
            cols: 64,
            std: 0.02,
            seed: 0,
        }
    }
}

/// Values given on the command line outside the subcommand's own flags.
#[derive(Debug, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub cache: Option<PathBuf>,
}

fn object(v: Value, what: &str) -> Result<Map<String, Value>, CliError> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Validation(format!("{what} must be a JSON object"))),
    }
}

/// Builds the settings for `command` from defaults, an optional config file
/// and the explicit flags (`null` entries in `flags` mean "not given").
pub fn resolve<S>(command: &str, config: Option<&Path>, flags: &impl Serialize, globals: &Globals) -> Result<S, CliError>
where
    S: Serialize + DeserializeOwned + Default,
{
    let mut merged = object(serde_json::to_value(S::default()).expect("settings serialize"), "settings")?;

    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        for (k, v) in object(file, "config file")? {
            if k == "command" {
                if v.as_str() != Some(command) {
                    return Err(CliError::Validation(format!("config file is for command {v}, not {command}")));
                }
                continue;
            }
            if !merged.contains_key(&k) {
                return Err(CliError::Validation(format!("unknown config key {k:?} for {command}")));
            }
            merged.insert(k, v);
        }
    }

    let flags = object(serde_json::to_value(flags).expect("flags serialize"), "flags")?;
    for (k, v) in flags {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    if let Some(seed) = globals.seed {
        if merged.contains_key("seed") {
            merged.insert("seed".into(), seed.into());
        } else if merged.contains_key("seeds") {
            merged.insert("seeds".into(), Value::from(vec![seed]));
        } else {
            log::warn!("--seed has no effect on {command}");
        }
    }
    if let Some(cache) = &globals.cache {
        if merged.contains_key("cache") {
            merged.insert("cache".into(), Value::from(cache.display().to_string()));
        } else {
            log::warn!("--cache has no effect on {command}");
        }
    }

    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Validation(format!("{command} settings: {e}")))
}

/// Writes `{"command": ..., <settings>}` to `dir/config.json`.
pub fn echo(dir: &Path, command: &str, settings: &impl Serialize) -> Result<PathBuf, CliError> {
    let mut doc = Map::new();
    doc.insert("command".into(), command.into());
    doc.extend(object(serde_json::to_value(settings).expect("settings serialize"), "settings")?);
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("create {}: {e}", dir.display())))?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&Value::Object(doc)).expect("json");
    fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))?;
    Ok(path)
}
