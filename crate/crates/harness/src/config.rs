use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vpnext::{ModelConfig, Variant};

use crate::data::SynthSpec;
use crate::error::{config_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate (and possibly checkpoint) every this many steps; 0 means
    /// only after the last step.
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 300,
            base_lr: 2e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
            eval_batch_size: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return config_err("batchSize and evalBatchSize must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return config_err(format!("clipNorm must be positive, got {}", self.clip_norm));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.poly_power >= 0.0) {
            return config_err("baseLr, weightDecay and polyPower must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return config_err("optimizer needs 0 ≤ beta1, beta2 < 1 and eps > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let variants = ["ds", "na", "vcr-2", "vcr-2+mock-2", "vcr-2+real-3"];
        AblationConfig { variants: variants.map(String::from).to_vec(), seeds: vec![0, 1, 2] }
    }
}

/// Everything a subcommand needs, read from one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthSpec,
    /// Load a corpus written by `gen-data` instead of generating in memory.
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub variant: String,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SynthSpec::default(),
            data_dir: None,
            model: ModelConfig::default(),
            variant: "vcr-2+real-3".into(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.model_for(&self.variant)?;
        for v in &self.ablation.variants {
            self.model_for(v)?;
        }
        if self.ablation.seeds.is_empty() {
            return config_err("ablation.seeds must not be empty");
        }
        Ok(())
    }

    /// The model section with `variant` applied and the data's image size
    /// and class count filled in.
    pub fn model_for(&self, variant: &str) -> Result<ModelConfig> {
        let v: Variant = variant.parse().map_err(|e: vpnext::ModelError| HarnessError::Config(e.to_string()))?;
        let mut m = self.model.clone();
        m.image_size = self.data.image_size;
        m.num_classes = self.data.num_classes;
        m.apply_variant(&v);
        m.validate()?;
        Ok(m)
    }
}
