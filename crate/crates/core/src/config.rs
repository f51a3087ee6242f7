//! Run configuration: one flat TOML file holding every module knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DEFAULT_MAX_SEGMENTS, DEFAULT_WINDOW_DAYS};
use crate::detector::{FusionMode, ModelConfig, ModelKind};
use crate::encoding::{EncoderKind, EncoderSpec, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, DEFAULT_LAYERS, DEFAULT_MODEL_DIM};
use crate::llm::{ClientKind, LlmClientSpec};
use crate::nn::Activation;
use crate::prompts::PROMPT_VERSION;
use crate::text::sha256_hex;
use crate::train::{BaseTraining, TrainConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [13, 42, 2024];

/// Where inter-source edges come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationSource {
    /// Retrieved environment plus intent inference.
    #[default]
    Full,
    SimZero,
    SimRule,
}

impl RelationSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationSource::Full => "full",
            RelationSource::SimZero => "sim-zero",
            RelationSource::SimRule => "sim-rule",
        }
    }
}

impl std::str::FromStr for RelationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RelationSource::Full),
            "sim-zero" => Ok(RelationSource::SimZero),
            "sim-rule" => Ok(RelationSource::SimRule),
            other => Err(Error::invalid(format!("unknown relation source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub window_days: i64,
    pub top_k: usize,
    pub max_segments: usize,

    pub encoder: EncoderKind,
    pub encoder_dim: usize,
    pub encoder_version: String,
    /// JSONL of precomputed token states, for the `lm` encoder.
    pub encoder_states: Option<PathBuf>,

    pub client: ClientKind,
    pub model_name: String,
    pub max_parallel: usize,
    pub retry_limit: usize,
    pub backoff_ms: u64,
    pub relations: RelationSource,

    pub model: ModelKind,
    pub fusion: FusionMode,
    pub layers: usize,
    pub model_dim: usize,
    pub edge_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub scale_attention: bool,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub base_training: BaseTraining,

    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            window_days: DEFAULT_WINDOW_DAYS,
            top_k: DEFAULT_TOP_K,
            max_segments: DEFAULT_MAX_SEGMENTS,
            encoder: EncoderKind::HashStub,
            encoder_dim: DEFAULT_MODEL_DIM,
            encoder_version: "hash-stub-v1".into(),
            encoder_states: None,
            client: ClientKind::Stub,
            model_name: "gpt-4o-mini".into(),
            max_parallel: 8,
            retry_limit: 3,
            backoff_ms: 500,
            relations: RelationSource::Full,
            model: ModelKind::OmiGraph,
            fusion: FusionMode::Prediction,
            layers: DEFAULT_LAYERS,
            model_dim: DEFAULT_MODEL_DIM,
            edge_dim: DEFAULT_MODEL_DIM,
            hidden: crate::gnn::DEFAULT_HIDDEN.to_vec(),
            activation: Activation::Relu,
            scale_attention: false,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            max_epochs: train.max_epochs,
            patience: train.patience,
            base_training: train.base_training,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("top_k", self.top_k),
            ("max_segments", self.max_segments),
            ("encoder_dim", self.encoder_dim),
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("edge_dim", self.edge_dim),
            ("max_parallel", self.max_parallel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.window_days <= 0 {
            return Err(Error::Config("window_days must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.encoder == EncoderKind::PretrainedLm && self.encoder_states.is_none() {
            return Err(Error::Config("the lm encoder needs encoder_states".into()));
        }
        self.train_config(0).validate()
    }

    /// SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(&[&self.to_toml()])
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            kind: self.encoder,
            dimension: self.encoder_dim,
            version: self.encoder_version.clone(),
        }
    }

    pub fn client_spec(&self) -> LlmClientSpec {
        LlmClientSpec {
            kind: self.client,
            model_name: self.model_name.clone(),
            prompt_version: PROMPT_VERSION.into(),
            max_parallel: self.max_parallel,
            retry_limit: self.retry_limit,
            backoff_ms: self.backoff_ms,
        }
    }

    pub fn gnn_config(&self) -> GnnConfig {
        GnnConfig {
            model_dim: self.model_dim,
            edge_dim: self.edge_dim,
            hidden: self.hidden.clone(),
            layers: self.layers,
            activation: self.activation,
            scale_attention: self.scale_attention,
        }
    }

    pub fn model_config(&self, kind: ModelKind, seed: u64) -> ModelConfig {
        ModelConfig {
            kind,
            fusion: self.fusion,
            encoder_dim: self.encoder_dim,
            gnn: self.gnn_config(),
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            base_training: self.base_training,
        }
    }
}
