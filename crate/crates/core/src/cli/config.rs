//! Flat `key = value` run configuration with documented defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::pretrain::{PretrainConfig, ReplacementMode};

/// `(key, default, description)`. An empty default means "unset".
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global random seed"),
    ("threads", "0", "worker threads; 0 uses every core"),
    ("out.dir", "run", "run directory for outputs, resolved config, hashes and logs"),
    ("model.preset", "tiny", "base | large | tiny"),
    ("model.layers", "", "layers per stream (overrides the preset)"),
    ("model.heads", "", "attention heads"),
    ("model.hidden", "", "hidden size"),
    ("model.ffn_dim", "", "feed-forward inner size"),
    ("model.max_text_len", "", "text positions before truncation"),
    ("model.max_audio_frames", "", "audio frames before truncation"),
    ("model.dropout", "", "dropout rate"),
    ("model.tie_mlm_decoder", "", "share the token table with the MLM output layer"),
    ("tokenizer.path", "", "vocabulary file from train-tokenizer"),
    ("data.manifest", "", "training manifest"),
    ("data.test_manifest", "", "held-out manifest scored after fine-tuning"),
    ("data.feature_dir", "", "feature cache directory; empty looks next to each WAV"),
    ("pretrain.steps", "1000000", "optimizer updates"),
    ("pretrain.batch_size", "16", "pairs per update"),
    ("pretrain.lr", "5e-5", "peak learning rate"),
    ("pretrain.warmup_fraction", "0.1", "share of steps spent in linear warmup"),
    ("pretrain.max_grad_norm", "1.0", "global gradient-norm clip; 0 disables"),
    ("pretrain.checkpoint_every", "10000", "steps between checkpoints; 0 keeps only the final one"),
    ("pretrain.replacement", "contiguous", "contiguous | independent frames for MCAM replacement"),
    ("finetune.task", "emotion", "emotion | sentiment | speaker"),
    ("finetune.checkpoint", "", "pre-trained checkpoint; empty trains from scratch"),
    ("finetune.epochs", "20", "passes over the training manifest"),
    ("finetune.batch_size", "4", "pairs per update"),
    ("finetune.lr", "1e-5", "peak AdamW learning rate, cosine-annealed to 0"),
    ("finetune.weight_decay", "0.01", "decoupled weight decay"),
    ("finetune.lambda", "1.0", "orthogonal regularization weight"),
    ("finetune.max_grad_norm", "1.0", "global gradient-norm clip; 0 disables"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.merge_text(&text, path)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key is declared in KEYS")
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.opt(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("{key} must be set")))
    }

    /// Every key, one `key = value` line each, sorted.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(self.get("model.preset"), Some(vocab_size))?;
        macro_rules! over {
            ($field:ident, $key:literal) => {
                if self.opt($key).is_some() {
                    cfg.$field = self.parse($key)?;
                }
            };
        }
        over!(layers, "model.layers");
        over!(heads, "model.heads");
        over!(hidden, "model.hidden");
        over!(ffn_dim, "model.ffn_dim");
        over!(max_text_len, "model.max_text_len");
        over!(max_audio_frames, "model.max_audio_frames");
        over!(dropout, "model.dropout");
        over!(tie_mlm_decoder, "model.tie_mlm_decoder");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            steps: self.parse("pretrain.steps")?,
            batch_size: self.parse("pretrain.batch_size")?,
            lr: self.parse("pretrain.lr")?,
            warmup_fraction: self.parse("pretrain.warmup_fraction")?,
            seed: self.parse("seed")?,
            replacement: self.parse::<ReplacementMode>("pretrain.replacement")?,
            max_grad_norm: self.parse("pretrain.max_grad_norm")?,
            checkpoint_every: self.parse("pretrain.checkpoint_every")?,
        })
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            epochs: self.parse("finetune.epochs")?,
            batch_size: self.parse("finetune.batch_size")?,
            lr: self.parse("finetune.lr")?,
            weight_decay: self.parse("finetune.weight_decay")?,
            lambda: self.parse("finetune.lambda")?,
            max_grad_norm: self.parse("finetune.max_grad_norm")?,
            seed: self.parse("seed")?,
        })
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}
