//! Run configuration: one TOML file with a fixed key schema. Unknown keys
//! are rejected; omitted keys take the selected preset's values.

use crate::curation::CurationConfig;
use crate::gspo::TrainerConfig;
use crate::judge::{RemoteConfig, RuleSet};
use crate::orchestrator::StageConfig;
use crate::policy::PolicyConfig;
use crate::reward::RewardWeights;
use crate::util::json_digest;
use crate::world::GenParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Desk-scale values that train the toy policy in minutes.
    Toy,
    /// Hyper-parameters of the full-scale model, kept as the reference.
    FullScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { output_dir: PathBuf::from("runs/default"), corpus: None, manifest: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rules {
    pub consistency: RuleSet,
    pub completeness: RuleSet,
}

impl Default for Rules {
    fn default() -> Self {
        Self { consistency: RuleSet::default_consistency(), completeness: RuleSet::default_completeness() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    /// Checkpoint every this many steps (the final step is always saved).
    pub checkpoint_every: usize,
    /// Rollout draws per setting when measuring the contrast fraction.
    pub attention_samples: usize,
    pub paths: Paths,
    pub world: GenParams,
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    pub stage: StageConfig,
    pub rewards: RewardWeights,
    pub rules: Rules,
    pub curation: CurationConfig,
    pub judge: RemoteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let trainer = match preset {
            Preset::Toy => TrainerConfig::toy(),
            Preset::FullScale => TrainerConfig::full_scale(),
        };
        Self {
            preset,
            seed: 7,
            workers: 0,
            checkpoint_every: 50,
            attention_samples: 8,
            paths: Paths::default(),
            world: GenParams::default(),
            policy: PolicyConfig::default(),
            trainer,
            stage: StageConfig::default(),
            rewards: RewardWeights::default(),
            rules: Rules::default(),
            curation: CurationConfig::default(),
            judge: RemoteConfig::default(),
        }
    }

    /// Parses `text` over the preset it names (toy when absent) and validates.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let preset = match table.get("preset") {
            None => Preset::Toy,
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut base, table);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the resolved configuration.
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.trainer.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.world.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.curation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if i64::try_from(self.seed).is_err() {
            return bad(format!("seed {} does not fit a TOML integer (max {})", self.seed, i64::MAX));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if self.attention_samples == 0 {
            return bad("attention_samples must be at least 1".into());
        }
        if self.policy.segments == 0 {
            return bad("policy.segments must be at least 1".into());
        }
        let s = &self.stage;
        if !(s.alpha.is_finite() && s.alpha >= 0.0) {
            return bad(format!("stage.alpha must be a non-negative number, got {}", s.alpha));
        }
        if s.snapshot_cadence == 0 {
            return bad("stage.snapshot_cadence must be at least 1".into());
        }
        if !(s.temperature.is_finite() && s.temperature > 0.0) {
            return bad(format!("stage.temperature must be positive, got {}", s.temperature));
        }
        if self.judge.max_attempts == 0 || self.judge.max_in_flight == 0 {
            return bad("judge.max_attempts and judge.max_in_flight must be at least 1".into());
        }
        let w = &self.rewards;
        if ![w.format, w.answer, w.intent, w.attention].iter().all(|x| x.is_finite()) {
            return bad("reward weights must be finite".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_toy_preset() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::preset(Preset::Toy));
        assert_eq!(c.trainer.group_size, 8);
        assert_eq!(c.stage.alpha, 0.3);
    }

    #[test]
    fn full_scale_preset_keeps_reference_values() {
        let c = RunConfig::from_toml_str("preset = \"full-scale\"").unwrap();
        assert_eq!(c.trainer.lr, 1e-6);
        assert_eq!(c.trainer.global_batch, 256);
        assert_eq!(c.trainer.max_seq_len, 32768);
    }

    #[test]
    fn partial_sections_merge_over_the_preset() {
        let c = RunConfig::from_toml_str("seed = 3\n[trainer]\ntotal_steps = 12\n[stage]\nalpha = 0.5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.trainer.total_steps, 12);
        assert_eq!(c.trainer.lr, TrainerConfig::toy().lr);
        assert_eq!(c.stage.alpha, 0.5);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["sed = 1", "[trainer]\nlearning_rate = 1.0", "[nope]\nx = 1", "[stage]\nalpah = 0.3"] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(ConfigError::Parse(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_errors() {
        for text in ["[trainer]\ngroup_size = 1", "checkpoint_every = 0", "[stage]\nsnapshot_cadence = 0", "[world]\nn_tasks = 0"] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(ConfigError::Invalid(_))), "{text}");
        }
    }

    #[test]
    fn round_trip_and_digest() {
        let c = RunConfig::from_toml_str("seed = 11\n[[rules.consistency]]\nid = \"only\"\nweight = 1.0\ntemplate = \"t\"\n").unwrap();
        assert_eq!(c.rules.consistency.templates().len(), 1);
        let again = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.digest(), again.digest());
        assert_ne!(c.digest(), RunConfig::default().digest());
    }
}
