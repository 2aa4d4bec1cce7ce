use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audio::FEATURE_DIM;
use crate::error::{Error, Result};

/// Architecture hyperparameters shared by both streams (`d_w = d_a = hidden`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layers per stream.
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_audio_frames: usize,
    pub audio_feature_dim: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    /// Reuse the token embedding table as the MLM output projection.
    pub tie_mlm_decoder: bool,
}

impl ModelConfig {
    /// N=3, A=12, H=768 with a 30K-unit vocabulary plus the four specials.
    pub fn base() -> Self {
        Self {
            layers: 3,
            heads: 12,
            hidden: 768,
            ffn_dim: 2048,
            vocab_size: 30_004,
            max_text_len: 512,
            max_audio_frames: 2048,
            audio_feature_dim: FEATURE_DIM,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            tie_mlm_decoder: true,
        }
    }

    /// N=6, A=12, H=768.
    pub fn large() -> Self {
        Self {
            layers: 6,
            ..Self::base()
        }
    }

    /// Desk-scale model for tests and toy runs: N=2, A=4, H=64.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn_dim: 256,
            vocab_size,
            max_text_len: 64,
            max_audio_frames: 256,
            audio_feature_dim: FEATURE_DIM,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            tie_mlm_decoder: false,
        }
    }

    pub fn preset(name: &str, vocab_size: Option<usize>) -> Result<Self> {
        let mut cfg = match name {
            "base" => Self::base(),
            "large" => Self::large(),
            "tiny" => Self::tiny(1000),
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        };
        if let Some(v) = vocab_size {
            cfg.vocab_size = v;
        }
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.audio_feature_dim != FEATURE_DIM {
            return Err(Error::Config(format!(
                "audio_feature_dim must be {FEATURE_DIM}, got {}",
                self.audio_feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let v = serde_json::to_value(self).expect("config serializes");
        v.as_object()
            .expect("struct serializes to object")
            .iter()
            .map(|(k, v)| (format!("model.{k}"), v.to_string()))
            .collect()
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        for (k, v) in pairs {
            if let Some(key) = k.strip_prefix("model.") {
                let value = serde_json::from_str(v)
                    .map_err(|e| Error::Config(format!("{k}={v}: {e}")))?;
                obj.insert(key.to_string(), value);
            }
        }
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
