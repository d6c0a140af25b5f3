//! The run configuration: one flat TOML table.
//!
//! Values are resolved in this order, later sources winning: built-in
//! defaults, `CEDUAL_SEED` (seed only), the config file, `--set key=value`
//! overrides, dedicated flags such as `--seed` and `--variant`. The resolved
//! record is stored verbatim inside every checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use cedual::model::{ContentClassifier, DecoderVariant, ModelConfig};
use cedual::optim::AdamConfig;
use cedual::train::TrainConfig;
use cedual::transformer::LayerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "CEDUAL_SEED";

/// Where training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    Jsonl,
    CsvEd,
    /// Generated in memory from the seed.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub min_freq: usize,
    pub synth_train_size: usize,
    pub synth_valid_size: usize,
    pub synth_emotions: usize,
    pub synth_vocab_size: usize,

    pub variant: DecoderVariant,
    pub content_classifier: ContentClassifier,
    pub d_model: usize,
    pub d_emb: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers_enc: usize,
    pub layers_dec_stage: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub dis_c_weight: f64,
    pub dis_e_weight: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub max_epochs: usize,
    pub eval_every: u64,
    pub patience: usize,
    pub adversary_lr_scale: f64,

    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let layer = LayerConfig::default();
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        Self {
            corpus: CorpusSource::Jsonl,
            train_path: None,
            valid_path: None,
            min_freq: 1,
            synth_train_size: 2000,
            synth_valid_size: 200,
            synth_emotions: 8,
            synth_vocab_size: 64,
            variant: DecoderVariant::Fcte,
            content_classifier: ContentClassifier::Adversarial,
            d_model: layer.d_model,
            d_emb: layer.d_emb,
            heads: layer.heads,
            d_ff: layer.d_ff,
            layers_enc: layer.layers_enc,
            layers_dec_stage: layer.layers_dec_stage,
            dropout: layer.dropout,
            max_len: layer.max_len,
            dis_c_weight: 1.0,
            dis_e_weight: 1.0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            warmup_steps: adam.warmup_steps,
            batch_size: train.batch_size,
            max_steps: train.max_steps,
            max_epochs: train.max_epochs,
            eval_every: train.eval_every,
            patience: train.patience,
            adversary_lr_scale: train.adversary_lr_scale,
            seed: None,
        }
    }
}

/// Command-line inputs that feed the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config_path: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub variant: Option<DecoderVariant>,
}

impl RunConfig {
    /// Resolves a configuration from every source; `env_seed` is the raw
    /// value of `CEDUAL_SEED`, if set.
    pub fn resolve(overrides: &Overrides, env_seed: Option<&str>) -> CliResult<Self> {
        let mut table = match &overrides.config_path {
            Some(path) => read_table(path)?,
            None => toml::Table::new(),
        };
        for item in &overrides.set {
            let (key, value) = parse_assignment(item)?;
            table.insert(key, value);
        }
        // Round-trip through text so that type errors point at the key.
        let text = toml::to_string(&table).expect("tables serialize");
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        if let Some(v) = overrides.variant {
            config.variant = v;
        }
        if let Some(s) = overrides.seed {
            config.seed = Some(s);
        }
        if config.seed.is_none() {
            config.seed = Some(match env_seed {
                Some(raw) => raw
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?,
                None => 0,
            });
        }
        config.validate()?;
        Ok(config)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn layer(&self) -> LayerConfig {
        LayerConfig {
            d_model: self.d_model,
            d_emb: self.d_emb,
            heads: self.heads,
            d_ff: self.d_ff,
            layers_enc: self.layers_enc,
            layers_dec_stage: self.layers_dec_stage,
            dropout: self.dropout,
            max_len: self.max_len,
        }
    }

    pub fn model(&self, vocab_size: usize, num_emotions: usize) -> ModelConfig {
        let mut config = ModelConfig::new(self.layer(), vocab_size, num_emotions, self.variant);
        config.content_classifier = self.content_classifier;
        config.dis_c_weight = self.dis_c_weight;
        config.dis_e_weight = self.dis_e_weight;
        config
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                warmup_steps: self.warmup_steps,
            },
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            max_epochs: self.max_epochs,
            eval_every: self.eval_every,
            patience: self.patience,
            adversary_lr_scale: self.adversary_lr_scale,
            seed: self.seed(),
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> CliResult<()> {
        self.layer().validate()?;
        self.train().validate()?;
        for (name, w) in [("dis_c_weight", self.dis_c_weight), ("dis_e_weight", self.dis_e_weight)] {
            if !w.is_finite() {
                return Err(CliError::Config(format!("{name} must be finite, got {w}")));
            }
        }
        if !(self.adversary_lr_scale > 0.0 && self.adversary_lr_scale.is_finite()) {
            return Err(CliError::Config(format!(
                "adversary_lr_scale must be positive, got {}",
                self.adversary_lr_scale
            )));
        }
        if self.min_freq == 0 {
            return Err(CliError::Config("min_freq must be at least 1".into()));
        }
        match self.corpus {
            CorpusSource::Jsonl | CorpusSource::CsvEd => {
                if self.train_path.is_none() {
                    return Err(CliError::Config(format!(
                        "train_path is required when corpus = {:?}",
                        self.corpus_name()
                    )));
                }
            }
            CorpusSource::Synthetic => {
                if self.synth_train_size == 0 {
                    return Err(CliError::Config("synth_train_size must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn corpus_name(&self) -> &'static str {
        match self.corpus {
            CorpusSource::Jsonl => "jsonl",
            CorpusSource::CsvEd => "csv-ed",
            CorpusSource::Synthetic => "synthetic",
        }
    }
}

fn read_table(path: &Path) -> CliResult<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse()
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Splits `key=value`. The value is read as a TOML value when it parses as
/// one and as a bare string otherwise, so `lr=3e-4` is a number and
/// `train_path=data/train.jsonl` a string.
fn parse_assignment(item: &str) -> CliResult<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("--set has an empty key in {item:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}
