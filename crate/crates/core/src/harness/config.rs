use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::controller::Activation;
use crate::curriculum::CurriculumConfig;
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::ponder::PonderConfig;
use crate::reward::RewardWeights;

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "PONDERLAB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Temperature through the first two curriculum stages.
    pub temp_initial: f64,
    /// Temperature reached at the end of the anneal.
    pub temp_final: f64,
    /// Steps over which the temperature anneals linearly, starting at `t2`.
    pub anneal_steps: usize,
    pub activations: [Activation; 2],
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            temp_initial: 1.0,
            temp_final: 0.5,
            anneal_steps: 500,
            activations: [Activation::Gelu; 2],
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temp_initial > 0.0 && self.temp_final > 0.0) {
            return Err(Error::Config("controller temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Temperature at training step `t` given the start of the autonomous stage.
    pub fn temperature(&self, t: usize, autonomous_from: usize) -> f64 {
        if t < autonomous_from {
            return self.temp_initial;
        }
        if self.anneal_steps == 0 {
            return self.temp_final;
        }
        let frac = ((t - autonomous_from) as f64 / self.anneal_steps as f64).min(1.0);
        self.temp_initial + frac * (self.temp_final - self.temp_initial)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Contrastive pairs used to extract the steering vector.
    pub extraction_size: usize,
    /// Extraction layer; defaults to the second-to-last.
    pub steering_layer: Option<usize>,
    /// Seed of the pinned evaluation suite, independent of the master seed.
    pub suite_seed: u64,
    pub suite_per_level: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            extraction_size: crate::steering::DEFAULT_EXTRACTION_SIZE,
            steering_layer: None,
            suite_seed: 2024,
            suite_per_level: crate::tasks::SUITE_PER_LEVEL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Master seed for everything except the backbone weights and the pinned suite.
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    /// Monitoring and checkpoint cadence.
    pub eval_every: usize,
    /// Apply adaptive reward-weight rebalancing at each monitoring step.
    pub rebalance: bool,
    pub backbone: BackboneConfig,
    pub ponder: PonderConfig,
    pub controller: ControllerConfig,
    pub reward: RewardWeights,
    pub grpo: GrpoConfig,
    pub curriculum: CurriculumConfig,
    pub tasks: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 64,
            steps: 3000,
            eval_every: 100,
            rebalance: false,
            backbone: BackboneConfig::default(),
            ponder: PonderConfig::default(),
            controller: ControllerConfig::default(),
            reward: RewardWeights::default(),
            grpo: GrpoConfig::default(),
            curriculum: CurriculumConfig::default(),
            tasks: TaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ponder.validate()?;
        self.controller.validate()?;
        self.reward.validate()?;
        self.grpo.validate()?;
        self.curriculum.validate()?;
        if self.batch_size == 0 || self.batch_size % self.grpo.group_size != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be a positive multiple of group_size {}",
                self.batch_size, self.grpo.group_size
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.tasks.extraction_size == 0 || self.tasks.suite_per_level == 0 {
            return Err(Error::Config("task counts must be positive".into()));
        }
        if let Some(layer) = self.tasks.steering_layer {
            if layer >= self.backbone.num_layers {
                return Err(Error::Config("steering_layer out of range".into()));
            }
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let config: TrainConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one `dotted.key=value` override. The value is read as JSON
    /// when possible and as a plain string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.trim().split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies overrides, then the seed environment variable when set.
    pub fn with_overrides<'a>(mut self, sets: impl IntoIterator<Item = &'a str>, env_seed: Option<&str>) -> Result<TrainConfig> {
        for s in sets {
            self.set(s)?;
        }
        if let Some(seed) = env_seed {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer")))?;
        }
        self.validate()?;
        Ok(self)
    }
}
