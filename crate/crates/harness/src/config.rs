//! Declarative experiment description.

use std::path::Path;

use applenet_core::baselines::BaselineKind;
use applenet_core::datagen::{DataConfig, PretrainConfig, Protocol};
use applenet_core::encoders::EncoderConfig;
use applenet_core::model::{CrpTarget, InferenceStyle, InjectionInput, LearnerConfig};
use applenet_core::promptcore::{ClassPosition, InitMode, LinearInit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: BaselineKind,
    pub protocol: Protocol,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fixed rate used during the warm-up epochs.
    pub warmup_rate: f64,
    pub warmup_epochs: usize,
    pub shots: usize,
    pub context_length: usize,
    pub attention_modules: usize,
    pub reduction: usize,
    /// Deepest vision stages used for content features; `null` means all.
    pub ms_layers: Option<usize>,
    pub injection_input: InjectionInput,
    pub crp_weight: f64,
    pub crp_target: CrpTarget,
    pub inference_style: InferenceStyle,
    pub temperature: f64,
    pub cls_position: ClassPosition,
    pub init_mode: InitMode,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: BaselineKind::Applenet,
            protocol: Protocol::B2n,
            epochs: 50,
            batch_size: 4,
            learning_rate: 2e-4,
            warmup_rate: 1e-7,
            warmup_epochs: 1,
            shots: 16,
            context_length: 4,
            attention_modules: 2,
            reduction: 4,
            ms_layers: None,
            injection_input: InjectionInput::ContentAndStyle,
            crp_weight: 0.1,
            crp_target: CrpTarget::PromptTokens,
            inference_style: InferenceStyle::EvalBatch,
            temperature: 0.07,
            cls_position: ClassPosition::End,
            init_mode: InitMode::Manual,
            seeds: vec![1, 2, 3],
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Core(applenet_core::Error::Contract(msg.into())))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if self.shots == 0 {
            return invalid("shots must be at least 1");
        }
        if self.context_length == 0 {
            return invalid("context_length must be at least 1");
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("warmup_rate", self.warmup_rate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid("temperature must be positive");
        }
        if !(self.crp_weight >= 0.0 && self.crp_weight.is_finite()) {
            return invalid("crp_weight must be finite and >= 0");
        }
        if self.init_mode == InitMode::Manual && self.method != BaselineKind::ZeroShot && self.context_length != 4 {
            return invalid("manual initialization needs context_length 4; use random or zeros");
        }
        if let Some(l) = self.ms_layers {
            if l == 0 || l > self.encoder.layers() {
                return invalid(format!("ms_layers must be in 1..={}", self.encoder.layers()));
            }
        }
        Ok(())
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            method: self.method,
            context_len: self.context_length,
            position: self.cls_position,
            init: self.init_mode,
            attention_modules: self.attention_modules,
            reduction: self.reduction,
            ms_layers: self.ms_layers,
            injection_input: self.injection_input,
            temperature: self.temperature,
            crp_weight: self.crp_weight,
            crp_target: self.crp_target,
            inference_style: self.inference_style,
            output_init: LinearInit::Zeros,
        }
    }

    /// SHA-256 of the canonical JSON of the whole config.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Hash of everything methods must share to be compared: encoders,
    /// data, protocol, shots, seeds, temperature and optimizer settings.
    pub fn comparison_hash(&self) -> String {
        let shared = serde_json::json!({
            "protocol": self.protocol,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "warmup_rate": self.warmup_rate,
            "warmup_epochs": self.warmup_epochs,
            "shots": self.shots,
            "temperature": self.temperature,
            "seeds": self.seeds,
            "data": self.data,
            "encoder": self.encoder,
            "pretrain": self.pretrain,
        });
        hex_digest(&serde_json::to_vec(&shared).expect("json serializes"))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
