//! Run configuration: model dimensions, loss weights, optimizer and data
//! settings. Serializable as TOML (config file) and JSON (run snapshot).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GenParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean of the projected stream over a patient's input visits.
    Mean,
    /// The last input visit's projected vector.
    LastVisit,
}

/// Loss-term weights and contrastive-loss shape parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_bi_con: f64,
    pub lambda_hrchy: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the forward direction in each bimodal contrastive pair.
    pub alpha_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 1.0,
            lambda_bi_con: 1.0,
            lambda_hrchy: 0.1,
            tau: 0.1,
            alpha_con: 0.25,
        }
    }
}

/// Architecture dimensions and structural flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub note_hidden: usize,
    pub word_dim: usize,
    pub note_filters: Vec<usize>,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub projector_width: usize,
    /// Restrict every attention stream so visit `t` sees only visits `<= t`.
    pub causal: bool,
    pub freeze_word_embeddings: bool,
    pub pool: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            note_hidden: 512,
            word_dim: 200,
            note_filters: vec![2, 3, 4],
            heads: 4,
            layers: 3,
            dropout: 0.1,
            projector_width: 1,
            causal: true,
            freeze_word_embeddings: false,
            pool: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    /// Per-attribute demographic embedding width (hidden / 6, rounded).
    pub fn demo_dim(&self) -> usize {
        ((self.hidden as f64) / 6.0).round().max(1.0) as usize
    }

    /// Feed-forward width inside the transformer blocks; the hidden
    /// dimension is shared across the whole model.
    pub fn ff_hidden(&self) -> usize {
        self.hidden
    }

    pub fn max_filter(&self) -> usize {
        self.note_filters.iter().copied().max().unwrap_or(1)
    }
}

/// Everything the data pipeline needs to produce train/valid/test batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub patients: usize,
    pub data_seed: u64,
    pub split_seed: u64,
    pub ratios: [f64; 3],
    /// When set, load this cohort instead of generating one.
    pub cohort_path: Option<PathBuf>,
    /// When set, parse this edge file instead of the built-in ontology.
    pub ontology_path: Option<PathBuf>,
    pub gen: GenParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            patients: 600,
            data_seed: 1,
            split_seed: 1,
            ratios: [0.8, 0.1, 0.1],
            cohort_path: None,
            ontology_path: None,
            gen: GenParams::default(),
        }
    }
}

/// Structural ablation switches. Dropped modalities are zeroed after the
/// temporal projector so the network shape is unchanged.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSwitches {
    pub drop_code: bool,
    pub drop_demo: bool,
    pub drop_note: bool,
    pub no_transformers: bool,
    pub no_mag: bool,
    pub no_contrastive: bool,
    pub no_hierarchy: bool,
    pub no_code_centring: bool,
}

impl AblationSwitches {
    pub fn parse_switch(name: &str) -> Option<fn(&mut AblationSwitches)> {
        match name {
            "drop_code" => Some(|s| s.drop_code = true),
            "drop_demo" => Some(|s| s.drop_demo = true),
            "drop_note" => Some(|s| s.drop_note = true),
            "no_transformers" => Some(|s| s.no_transformers = true),
            "no_mag" => Some(|s| s.no_mag = true),
            "no_contrastive" => Some(|s| s.no_contrastive = true),
            "no_hierarchy" => Some(|s| s.no_hierarchy = true),
            "no_code_centring" => Some(|s| s.no_code_centring = true),
            _ => None,
        }
    }

    pub const ALL: [&'static str; 8] = [
        "drop_code",
        "drop_demo",
        "drop_note",
        "no_transformers",
        "no_mag",
        "no_contrastive",
        "no_hierarchy",
        "no_code_centring",
    ];
}

/// Full training configuration; defaults reproduce the reference protocol
/// (Adam, constant lr 1e-4, batch 4, at most 50 epochs, patience 5).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub ablation: AblationSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            lr: 1e-4,
            batch_size: 4,
            max_epochs: 50,
            early_stop_patience: 5,
            optimizer: OptimizerKind::Adam,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            ablation: AblationSwitches::default(),
        }
    }
}

impl TrainConfig {
    pub fn load_toml(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.hidden == 0 || m.heads == 0 || m.hidden % m.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "hidden {} must be a positive multiple of heads {}",
                m.hidden, m.heads
            )));
        }
        if m.note_filters.is_empty() || m.note_filters.iter().any(|f| *f == 0 || *f > 4) {
            return Err(ConfigError::Invalid(format!(
                "note filters {:?} must be within 1..=4 (notes are padded to length 4)",
                m.note_filters
            )));
        }
        if m.projector_width == 0 {
            return Err(ConfigError::Invalid("projector width must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(ConfigError::Invalid(format!("dropout {} outside [0, 1)", m.dropout)));
        }
        let l = &self.loss;
        if l.lambda_ce < 0.0 || l.lambda_bi_con < 0.0 || l.lambda_hrchy < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "loss weights ({}, {}, {}) must be nonnegative",
                l.lambda_ce, l.lambda_bi_con, l.lambda_hrchy
            )));
        }
        if l.tau <= 0.0 {
            return Err(ConfigError::Invalid(format!("temperature {} must be positive", l.tau)));
        }
        if !(0.0..=1.0).contains(&l.alpha_con) {
            return Err(ConfigError::Invalid(format!(
                "contrastive direction weight {} outside [0, 1]",
                l.alpha_con
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ConfigError::Invalid(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON form; identifies a
    /// configuration in reports.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}
