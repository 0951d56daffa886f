//! Run configuration: a TOML file with `[model]`, `[train]` and `[data]`
//! tables, plus dotted `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::checkpoint::config_hash;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("override `{0}` is not of the form section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub adapter_dim: usize,
    pub saca_dim: usize,
    pub saca_layers: usize,
    pub use_saca: bool,
    pub use_dgp: bool,
    /// Add learned intra-span position embeddings to encoder tokens.
    pub span_positions: bool,
    pub max_span: usize,
    pub max_positions: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            encoder_layers: 2,
            decoder_layers: 2,
            adapter_dim: 256,
            saca_dim: 256,
            saca_layers: 2,
            use_saca: true,
            use_dgp: true,
            span_positions: false,
            max_span: 16,
            max_positions: 129,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail("model_dim must be a positive multiple of heads");
        }
        if self.ffn_dim == 0 || self.adapter_dim == 0 || self.saca_dim == 0 {
            return fail("ffn_dim, adapter_dim and saca_dim must be positive");
        }
        if self.use_dgp && !self.use_saca {
            return fail("use_dgp requires use_saca");
        }
        if self.max_positions < 2 || self.max_span == 0 {
            return fail("max_positions must be at least 2 and max_span positive");
        }
        Ok(())
    }

    /// Parameters added on top of the baseline by the structure-aware
    /// cross-attention: input/output projections plus per layer three
    /// `m x m` projections and a three-row relation embedding.
    pub fn saca_param_count(&self) -> usize {
        if !self.use_saca {
            return 0;
        }
        let (d, m, l) = (self.model_dim, self.saca_dim, self.saca_layers);
        2 * d * m + l * (3 * m * m + 3 * m)
    }

    /// Gate parameters: two `d x m` projections and an `m`-vector.
    pub fn dgp_param_count(&self) -> usize {
        if !self.use_dgp {
            return 0;
        }
        2 * self.model_dim * self.saca_dim + self.saca_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the gate sparsity term.
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Evaluations without dev improvement before stopping; 0 disables.
    pub patience: u64,
    pub seed: u64,
    pub freeze: Vec<String>,
    pub beam_size: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.01,
            max_steps: 2000,
            eval_every: 200,
            patience: 0,
            seed: 0,
            freeze: Vec::new(),
            beam_size: 5,
            max_len: 128,
            length_penalty: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.lambda >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if self.batch_size == 0 || self.beam_size == 0 || self.max_len == 0 {
            return fail("batch_size, beam_size and max_len must be positive");
        }
        if !(self.lr > 0.0) || self.max_steps == 0 {
            return fail("lr and max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub vocab: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text form; the checkpoint hash is taken over this.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn hash(&self) -> Result<u64, ConfigError> {
        Ok(config_hash(&self.to_toml()?))
    }

    /// Apply `section.key=value` overrides. Values are read as TOML, falling
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc = toml::Value::try_from(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            let (section, field) = key.trim().split_once('.').ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let table = doc
                .get_mut(section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            table.insert(field.to_string(), value);
        }
        let cfg: Self = doc.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }
}
