//! Run configuration: one JSON document with a section per component,
//! plus `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use trajrefine::backbone::BackboneConfig;
use trajrefine::model::ModelConfig;
use trajrefine::quality::InferenceConfig;
use trajrefine::refine::RefineConfig;
use trajrefine::scenario::GeneratorConfig;
use trajrefine::training::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Sweep iterations `0..=I`, reporting every one.
    #[default]
    Fixed,
    /// Quality-score controlled stopping.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Iterations of the fixed sweep.
    pub iterations: usize,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Fixed,
            iterations: 5,
            jobs: 1,
        }
    }
}

/// Default locations used when a command is not given an explicit path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub run_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub analysis_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train_data: "data/train.jsonl".into(),
            test_data: "data/test.jsonl".into(),
            run_dir: "runs/train".into(),
            eval_dir: "runs/eval".into(),
            analysis_dir: "runs/analysis".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub backbone: BackboneConfig,
    pub refine: RefineConfig,
    pub inference: InferenceConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    /// Seeds parameter initialization, shuffling, and dropout.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            backbone: BackboneConfig::default(),
            refine: RefineConfig::default(),
            inference: InferenceConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            seed: 7,
        }
    }
}

/// Deserializes with the offending key path in the error message.
pub(crate) fn from_value<T: DeserializeOwned>(value: Value, what: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(if path == "." {
            format!("{what}: {inner}")
        } else {
            format!("{what}: at `{path}`: {inner}")
        })
    })
}

/// One `section.key=value` override. The value is parsed as JSON when it
/// parses, and taken as a string otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn parse(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{s}` is not of the form section.key=value")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Usage(format!("override `{s}` has an empty key segment")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Override { path, value })
    }

    pub fn key(&self) -> String {
        self.path.join(".")
    }

    /// Sets the value inside `doc`, refusing keys the document lacks.
    pub fn apply(&self, doc: &mut Value) -> Result<()> {
        let mut node = doc;
        for (depth, seg) in self.path.iter().enumerate() {
            let here = self.path[..=depth].join(".");
            node = match node {
                Value::Object(map) => map.get_mut(seg).ok_or(CliError::UnknownKey(here))?,
                _ => return Err(CliError::UnknownKey(here)),
            };
        }
        *node = self.value.clone();
        Ok(())
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let base: RunConfig = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                from_value(value, &path.display().to_string())?
            }
            None => RunConfig::default(),
        };
        let mut doc = serde_json::to_value(&base)?;
        for o in overrides {
            o.apply(&mut doc)?;
        }
        let cfg: RunConfig = from_value(doc, "config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.refine.validate(self.generator.t_f)?;
        self.inference.validate()?;
        self.train.validate()?;
        if self.eval.jobs == 0 {
            return Err(CliError::Config("eval.jobs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            refine: self.refine.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_parse_json_or_string() {
        let o = Override::parse("refine.radius=fixed:5").unwrap();
        assert_eq!(o.value, Value::String("fixed:5".into()));
        let o = Override::parse("generator.lane_count=[2,2]").unwrap();
        assert_eq!(o.value, serde_json::json!([2, 2]));
        assert!(Override::parse("train.alpha").is_err());
        assert!(Override::parse("train..alpha=1").is_err());
        let cfg = RunConfig::load(
            None,
            &[
                Override::parse("train.alpha=0.5").unwrap(),
                Override::parse("refine.encoding=agent-centric").unwrap(),
                Override::parse("seed=3").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.refine.encoding, trajrefine::refine::Encoding::AgentCentric);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_override_key_is_named() {
        let err = RunConfig::load(None, &[Override::parse("generator.betta=1").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("generator.betta"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let err = RunConfig::load(None, &[Override::parse("train.alpha=-1").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        let err = RunConfig::load(None, &[Override::parse("train.epochs=\"x\"").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }
}
