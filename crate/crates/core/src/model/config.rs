use super::vocab::Vocabulary;
use crate::config::KeyValues;
use crate::error::{bail, Result};

/// Architecture hyperparameters. `content_dim + 1` is the encoder output width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: Vocabulary,
    pub feat_dim: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_ffn: usize,
    pub content_dim: usize,
    pub pred_dim: usize,
    pub pred_layers: usize,
    pub pred_ffn: usize,
    /// 1-based prediction layer whose output provides the AIF queries.
    pub tap_layer: usize,
    pub chunk_size: usize,
    pub separate_aif_values: bool,
}

impl ModelConfig {
    pub fn toy(vocab: Vocabulary, feat_dim: usize) -> Self {
        Self {
            vocab,
            feat_dim,
            enc_dim: 32,
            enc_layers: 2,
            enc_ffn: 64,
            content_dim: 32,
            pred_dim: 32,
            pred_layers: 4,
            pred_ffn: 64,
            tap_layer: 2,
            chunk_size: 4,
            separate_aif_values: false,
        }
    }

    /// Encoder output width `d` (content plus the weight channel).
    pub fn enc_out_dim(&self) -> usize {
        self.content_dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("enc_dim", self.enc_dim),
            ("enc_layers", self.enc_layers),
            ("enc_ffn", self.enc_ffn),
            ("content_dim", self.content_dim),
            ("pred_dim", self.pred_dim),
            ("pred_layers", self.pred_layers),
            ("pred_ffn", self.pred_ffn),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                bail!(Config, "{} must be positive", name);
            }
        }
        if self.tap_layer == 0 || self.tap_layer > self.pred_layers {
            bail!(Config, "tap_layer {} outside 1..={}", self.tap_layer, self.pred_layers);
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "vocab",
        "feat_dim",
        "enc_dim",
        "enc_layers",
        "enc_ffn",
        "content_dim",
        "pred_dim",
        "pred_layers",
        "pred_ffn",
        "tap_layer",
        "chunk_size",
        "separate_aif_values",
    ];

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("vocab", self.vocab.symbols().join(" "));
        kv.set("feat_dim", self.feat_dim);
        kv.set("enc_dim", self.enc_dim);
        kv.set("enc_layers", self.enc_layers);
        kv.set("enc_ffn", self.enc_ffn);
        kv.set("content_dim", self.content_dim);
        kv.set("pred_dim", self.pred_dim);
        kv.set("pred_layers", self.pred_layers);
        kv.set("pred_ffn", self.pred_ffn);
        kv.set("tap_layer", self.tap_layer);
        kv.set("chunk_size", self.chunk_size);
        kv.set("separate_aif_values", self.separate_aif_values);
        kv
    }

    /// Reads the keys in [`Self::KEYS`], falling back to `base` for missing ones.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let vocab = match kv.get_str("vocab") {
            Some(s) => Vocabulary::new(s.split_whitespace().map(String::from).collect())?,
            None => base.vocab.clone(),
        };
        let cfg = Self {
            vocab,
            feat_dim: kv.get_or("feat_dim", base.feat_dim)?,
            enc_dim: kv.get_or("enc_dim", base.enc_dim)?,
            enc_layers: kv.get_or("enc_layers", base.enc_layers)?,
            enc_ffn: kv.get_or("enc_ffn", base.enc_ffn)?,
            content_dim: kv.get_or("content_dim", base.content_dim)?,
            pred_dim: kv.get_or("pred_dim", base.pred_dim)?,
            pred_layers: kv.get_or("pred_layers", base.pred_layers)?,
            pred_ffn: kv.get_or("pred_ffn", base.pred_ffn)?,
            tap_layer: kv.get_or("tap_layer", base.tap_layer)?,
            chunk_size: kv.get_or("chunk_size", base.chunk_size)?,
            separate_aif_values: kv.get_or("separate_aif_values", base.separate_aif_values)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
