//! Whole-run configuration: one JSON file, one seed, one optimizer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SplitCounts, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, LatencyConfig, SweepConfig};
use crate::first_pass::{FirstPassConfig, FirstPassTrainConfig};
use crate::numerics::AdamConfig;
use crate::rescorer::{JointTrainConfig, RescorerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub first_pass_ckpt: PathBuf,
    pub rescorer_ckpt: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            first_pass_ckpt: "first_pass.ckpt".into(),
            rescorer_ckpt: "rescorer.ckpt".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives corpus generation, initialisation and batch order everywhere.
    pub seed: u64,
    pub task: SyntheticTaskSpec,
    pub splits: SplitCounts,
    pub first_pass: FirstPassConfig,
    pub first_pass_train: FirstPassTrainConfig,
    pub rescorer: RescorerConfig,
    pub joint: JointTrainConfig,
    pub optimizer: AdamConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub latency: LatencyConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: SyntheticTaskSpec::default(),
            splits: SplitCounts::default(),
            first_pass: FirstPassConfig::default(),
            first_pass_train: FirstPassTrainConfig::default(),
            rescorer: RescorerConfig::default(),
            joint: JointTrainConfig::default(),
            optimizer: AdamConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            latency: LatencyConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Prefixes a sub-config's error with its section, joining onto a leading
/// `field:` when the message names one.
fn scoped(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(m) => {
            let names_field = m.split_once(':').is_some_and(|(f, _)| !f.is_empty() && !f.contains(' '));
            Error::Config(if names_field {
                format!("{section}.{m}")
            } else {
                format!("{section}: {m}")
            })
        }
        other => other,
    })
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| match e {
            Error::InvalidSpec(m) => Error::Config(format!("task: {m}")),
            other => other,
        })?;
        scoped("first_pass.encoder", self.first_pass.encoder.validate())?;
        scoped("rescorer", self.rescorer.validate())?;
        scoped("joint", self.joint.validate())?;
        scoped("sweep", self.sweep.validate())?;
        scoped("eval", self.eval.validate())?;
        let a = &self.optimizer;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.learning_rate: {} must be positive and finite",
                a.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config("optimizer.beta1/beta2: must lie in [0, 1)".into()));
        }
        if self.first_pass.encoder.feature_dim != self.task.feature_dim {
            return Err(Error::Config(format!(
                "first_pass.encoder.feature_dim: {} differs from task.feature_dim {}",
                self.first_pass.encoder.feature_dim, self.task.feature_dim
            )));
        }
        if self.rescorer.memory_dim != self.first_pass.encoder.dim {
            return Err(Error::Config(format!(
                "rescorer.memory_dim: {} differs from first_pass.encoder.dim {}",
                self.rescorer.memory_dim, self.first_pass.encoder.dim
            )));
        }
        if self.first_pass_train.batch_size == 0 || self.first_pass_train.epochs == 0 {
            return Err(Error::Config("first_pass_train: epochs and batch_size must be at least 1".into()));
        }
        if self.latency.utterances == 0 || self.latency.repetitions == 0 {
            return Err(Error::Config("latency: utterances and repetitions must be at least 1".into()));
        }
        Ok(())
    }

    /// First-pass training settings with the shared optimizer applied.
    pub fn first_pass_train(&self) -> FirstPassTrainConfig {
        FirstPassTrainConfig {
            adam: self.optimizer,
            ..self.first_pass_train
        }
    }

    /// Rescorer training settings with the run seed and shared optimizer applied.
    pub fn joint_train(&self) -> JointTrainConfig {
        JointTrainConfig {
            seed: self.seed,
            adam: self.optimizer,
            ..self.joint
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.joint.ratio = 0.6;
        c.sweep.ratios = vec![0.0, 0.5];
        c.paths.corpus = "elsewhere/data".into();
        c.optimizer.learning_rate = 3e-4;
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        c.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }

    #[test]
    fn effective_training_settings() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.optimizer.learning_rate = 0.5;
        assert_eq!(c.joint_train().seed, 9);
        assert_eq!(c.joint_train().adam.learning_rate, 0.5);
        assert_eq!(c.first_pass_train().adam.learning_rate, 0.5);
    }

    #[test]
    fn ratio_out_of_range_names_field_and_bound() {
        let err = RunConfig::from_json(r#"{"joint": {"ratio": 1.5}}"#).unwrap_err().to_string();
        assert!(err.contains("joint.ratio") && err.contains("[0, 1]"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"joint": {"ratoi": 0.2}}"#).unwrap_err().to_string();
        assert!(err.contains("ratoi"), "{err}");
        let err = RunConfig::from_json(r#"{"seed": "one"}"#).unwrap_err().to_string();
        assert!(err.contains("u64"), "{err}");
        // nested seeds are not part of the file format
        assert!(RunConfig::from_json(r#"{"joint": {"seed": 3}}"#).is_err());
    }

    #[test]
    fn cross_section_consistency() {
        let err = RunConfig::from_json(r#"{"rescorer": {"memory_dim": 32}}"#).unwrap_err().to_string();
        assert!(err.contains("rescorer.memory_dim"), "{err}");
        let err = RunConfig::from_json(r#"{"task": {"vocab_size": 1}}"#).unwrap_err().to_string();
        assert!(err.contains("task:"), "{err}");
        let err = RunConfig::from_json(r#"{"rescorer": {"heads": 5}}"#).unwrap_err().to_string();
        assert!(err.contains("rescorer: rescorer dim"), "{err}");
    }
}
