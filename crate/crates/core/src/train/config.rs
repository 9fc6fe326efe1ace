//! Run configuration: one JSON document with strict keys.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::losses::LossWeights;
use crate::model::{Ablation, ModelConfig};
use crate::nnkit::{AdamConfig, LearningRates};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; the command line may override it.
    pub dir: Option<String>,
    /// Camera names to train on; `None` means every camera of the train split.
    pub train_cameras: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Restrict the L1 term to ground-truth foreground pixels.
    pub masked_l1: bool,
    /// Skinning samples drawn per step.
    pub skin_samples: usize,
    /// Size of the pre-sampled surface pool the per-step batch is drawn from.
    pub skin_pool: usize,
    /// Fraction of the iterations after which the skinning weight is scaled.
    pub skin_decay_at: f64,
    pub skin_decay_factor: f64,
    pub perceptual_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            masked_l1: true,
            skin_samples: 512,
            skin_pool: 16384,
            skin_decay_at: 0.3,
            skin_decay_factor: 0.1,
            perceptual_seed: super::perceptual::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub iterations: u64,
    pub seed: u64,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    /// Loss rows are written every `log_every` steps and at the last step.
    pub log_every: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            seed: 0,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            log_every: 100,
            checkpoint_every: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    pub output: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            ablation: Ablation::default(),
            output: "runs/default".into(),
        }
    }
}

/// Dotted paths of keys in `v` that `reference` does not have.
fn unknown_keys(v: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(got), Value::Object(known)) = (v, reference) else {
        return;
    };
    for (k, sub) in got {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(path),
            Some(r) => unknown_keys(sub, r, &path, out),
        }
    }
}

impl RunConfig {
    /// Parses a (possibly partial) document; missing keys take defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        let reference = serde_json::to_value(Self::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&v, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(ConfigError::Invalid)?;
        self.loss.weights.validate().map_err(ConfigError::Invalid)?;
        let l = &self.loss;
        if l.skin_samples == 0 || l.skin_pool < l.skin_samples {
            return bad("loss.skin_samples must be positive and at most loss.skin_pool".into());
        }
        if !(0.0..=1.0).contains(&l.skin_decay_at) || !(l.skin_decay_factor >= 0.0) {
            return bad("loss.skin_decay_at must lie in [0,1] and skin_decay_factor be non-negative".into());
        }
        let lr = &self.optim.lr;
        if [lr.network, lr.gaussian_position, lr.gaussian_attribute, lr.latent]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("optim.lr values must be finite and non-negative".into());
        }
        let a = &self.optim.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("optim.adam betas must lie in [0,1) and eps be positive".into());
        }
        if self.optim.log_every == 0 {
            return bad("optim.log_every must be positive".into());
        }
        Ok(())
    }

    /// Skinning-loss weight in effect at `step`.
    pub fn skin_weight(&self, step: u64) -> f64 {
        let at = (self.loss.skin_decay_at * self.optim.iterations as f64).floor() as u64;
        if step >= at && self.optim.iterations > 0 {
            self.loss.weights.skin * self.loss.skin_decay_factor
        } else {
            self.loss.weights.skin
        }
    }
}

pub const PRESETS: [&str; 2] = ["spinstop", "tiny"];

/// Shipped run configurations matching the builtin datasets.
pub fn preset(name: &str) -> Option<RunConfig> {
    let mut c = RunConfig::default();
    match name {
        "spinstop" => {
            c.model.gaussians = 3000;
            c.model.motion.window_step = 5;
            c.output = "runs/spinstop".into();
        }
        "tiny" => {
            c.model.gaussians = 400;
            c.optim.iterations = 300;
            c.optim.log_every = 10;
            c.optim.checkpoint_every = 0;
            c.loss.skin_pool = 2048;
            c.loss.skin_samples = 128;
            c.output = "runs/tiny".into();
        }
        _ => return None,
    }
    Some(c)
}
