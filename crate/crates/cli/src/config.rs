//! Run configuration: built-in defaults, overlaid by a TOML file and then by
//! `--set key=value` overrides. Keys absent from the defaults are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crl_core::encoders::TrainConfig;
use crl_core::flow::FlowTrainConfig;
use crl_core::mask::BenchConfig;
use crl_core::testbed::{CorpusConfig, MdpFamily};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; when set it replaces every section seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Hold out one multi-step trajectory per task from training.
    pub holdout: bool,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub flow: FlowOptions,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
}

/// Optional flow-matching head trained on one-hot action chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowOptions {
    pub enabled: bool,
    /// Chunk horizon `H`.
    pub horizon: usize,
    pub train: FlowTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub suites: Vec<String>,
    pub residual_std_max: f64,
    pub min_spearman: f64,
    pub min_discrimination: f64,
    pub gradient_tol: f64,
    pub gradient_step: f64,
    pub gradient_batch: usize,
    pub isolation_sequences: usize,
    pub packing_batches: usize,
    pub shard_counts: Vec<usize>,
    pub shard_batch: usize,
}

pub const ALL_SUITES: [&str; 7] = [
    "occupancy",
    "ranking",
    "goal_discrimination",
    "gradient",
    "isolation",
    "packing",
    "shard",
];

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            suites: ALL_SUITES.iter().map(|s| s.to_string()).collect(),
            residual_std_max: 0.1,
            min_spearman: 0.9,
            min_discrimination: 0.9,
            gradient_tol: 1e-5,
            gradient_step: 3e-5,
            gradient_batch: 48,
            isolation_sequences: 20,
            packing_batches: 20,
            shard_counts: vec![1, 2, 4, 8],
            shard_batch: 32,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            holdout: true,
            corpus: CorpusConfig {
                family: MdpFamily::Chain { arms: 4, arm_len: 25 },
                num_tasks: 4,
                trajectories_per_task: 10,
                seed: 1,
                gamma: 0.995,
                goal_token_len: 4,
                goal_vocab: 64,
            },
            train: TrainConfig::default(),
            flow: FlowOptions {
                enabled: false,
                horizon: 2,
                train: FlowTrainConfig {
                    steps: 1500,
                    hidden: 32,
                    ..FlowTrainConfig::default()
                },
            },
            verify: VerifyConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (TOML), then `overrides` in order, then `seed`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        value["seed"] = Value::Null;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let table: toml::Table = toml::from_str(&text)?;
            merge(&mut value, serde_json::to_value(table)?, "")?;
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override '{item}' is not key=value")))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        if let Some(s) = seed {
            value["seed"] = s.into();
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.apply_seed();
        config.validate()?;
        Ok(config)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.corpus.seed = s;
            self.train.seed = s;
            self.flow.train.seed = s;
            self.bench.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.flow.horizon == 0 {
            return Err(CliError::Config("flow.horizon must be >= 1".into()));
        }
        if self.flow.train.sample_steps == 0 {
            return Err(CliError::Config("flow.train.sample_steps must be >= 1".into()));
        }
        if let Some(bad) = self.verify.suites.iter().find(|s| !ALL_SUITES.contains(&s.as_str())) {
            return Err(CliError::Config(format!(
                "unknown suite '{bad}' (known: {})",
                ALL_SUITES.join(", ")
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// `raw` as a TOML value when it parses as one, else as a bare string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Tables holding a `kind` tag are enum variants and replace the default
/// wholesale; their fields are checked when the config is deserialized.
fn is_tagged(v: &Value) -> bool {
    v.as_object().is_some_and(|m| m.contains_key("kind"))
}

fn merge(base: &mut Value, incoming: Value, prefix: &str) -> Result<(), CliError> {
    let Value::Object(fields) = incoming else {
        *base = incoming;
        return Ok(());
    };
    for (key, v) in fields {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let slot = base
            .as_object_mut()
            .and_then(|m| m.get_mut(&key))
            .ok_or_else(|| CliError::Config(format!("unknown key '{path}'")))?;
        if slot.is_object() && v.is_object() && !is_tagged(&v) {
            merge(slot, v, &path)?;
        } else {
            *slot = v;
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown key '{key}'")))?;
    }
    *slot = v;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn overrides_and_seed_apply() {
        let sets = vec!["train.steps=7".to_owned(), "train.optimizer=sgd".to_owned(), "holdout=false".to_owned()];
        let config = RunConfig::resolve(None, &sets, Some(42)).unwrap();
        assert_eq!(config.train.steps, 7);
        assert_eq!(config.train.optimizer, crl_core::optim::OptimizerKind::Sgd);
        assert!(!config.holdout);
        assert_eq!((config.corpus.seed, config.train.seed, config.flow.train.seed), (42, 42, 42));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.stepz=3", "nope=1", "corpus.family.kind.x=1"] {
            let err = RunConfig::resolve(None, &[bad.to_owned()], None).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{bad}: {err}");
        }
        assert!(RunConfig::resolve(None, &["train.steps".to_owned()], None).is_err());
    }

    #[test]
    fn file_layer_swaps_enum_variants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[corpus]\nnum_tasks = 3\nfamily = { kind = \"grid\", width = 4, height = 3 }\n[train]\nsteps = 11\n",
        )
        .unwrap();
        let config = RunConfig::resolve(Some(&path), &[], None).unwrap();
        assert_eq!(config.corpus.family, MdpFamily::Grid { width: 4, height: 3 });
        assert_eq!(config.train.steps, 11);

        std::fs::write(&path, "[corpus]\nfamily = { kind = \"grid\", width = 4, depth = 3 }\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &[], None).is_err());
        std::fs::write(&path, "[trian]\nsteps = 1\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &[], None).is_err());
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        let err = RunConfig::resolve(None, &["verify.suites=[\"speed\"]".to_owned()], None).unwrap_err();
        assert!(err.to_string().contains("unknown suite"));
    }
}
