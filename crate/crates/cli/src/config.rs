use std::path::Path;

use direcgnn_core::eval::CandidateMode;
use direcgnn_core::graph::GeneratorConfig;
use direcgnn_core::model::ModelConfig;
use direcgnn_core::train::{TrainConfig, Variant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{CliError, CliResult};

pub const THREADS_VAR: &str = "DIRECGNN_THREADS";

/// Worker thread cap from `DIRECGNN_THREADS`; 1 when unset.
pub fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_VAR} must be a positive integer, got {s:?}"))),
        },
    }
}

/// Overlays the objects of `patch` onto `base`, key by key.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// `base` with the JSON document at `path` laid over it.
pub fn load_over<T: Serialize + DeserializeOwned>(base: &T, path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("serialisable"))
            .expect("round trip"));
    };
    let text = std::fs::read_to_string(path)?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut v = serde_json::to_value(base).expect("serialisable");
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn generator(preset: &str, path: Option<&Path>, seed: Option<u64>) -> CliResult<GeneratorConfig> {
    let base = GeneratorConfig::preset(preset)
        .ok_or_else(|| CliError::Config(format!("unknown generator preset {preset:?}")))?;
    let mut cfg = load_over(&base, path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn run_config(preset: &str, path: Option<&Path>, seed: Option<u64>, variant: Option<Variant>) -> CliResult<RunConfig> {
    let model = ModelConfig::preset(preset).ok_or_else(|| CliError::Config(format!("unknown model preset {preset:?}")))?;
    let base = RunConfig {
        model,
        train: TrainConfig::default(),
    };
    let mut cfg = load_over(&base, path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(v) = variant {
        v.apply(&mut cfg.model, &mut cfg.train);
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Cells of an ablation sweep: the cross product of every list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub variants: Vec<Variant>,
    /// Each entry is one set of walk lengths for the path branch.
    pub path_lengths: Vec<Vec<usize>>,
    /// Walks per node and length.
    pub samples: Vec<usize>,
    pub lambda_align: Vec<f64>,
    pub seeds: Vec<u64>,
    pub candidates: CandidateMode,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Full],
            path_lengths: vec![vec![2], vec![6], vec![10]],
            samples: vec![5],
            lambda_align: vec![0.1],
            seeds: Vec::new(),
            candidates: CandidateMode::Fixed,
        }
    }
}

pub fn sweep(path: Option<&Path>) -> CliResult<SweepSpec> {
    load_over(&SweepSpec::default(), path)
}
