use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::special;

/// Architecture hyperparameters of an [`EncoderModel`](super::EncoderModel).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rope_theta: f64,
    pub rmsnorm_eps: f64,
    /// Kept as a hook; only 0 is supported.
    pub dropout: f64,
    pub pad_token_id: u32,
    pub unk_token_id: u32,
    pub cls_token_id: u32,
    pub sep_token_id: u32,
    pub mask_token_id: u32,
}

impl ModelConfig {
    /// Small default: depth 4, width 64, 4 heads, context 1,024.
    pub fn toy(vocab_size: usize) -> Self {
        Self::new(4, 64, 4, vocab_size, 1024)
    }

    pub fn new(depth: usize, width: usize, num_heads: usize, vocab_size: usize, max_context: usize) -> Self {
        Self {
            depth,
            width,
            num_heads,
            ffn_hidden: Self::default_ffn_hidden(width),
            vocab_size,
            max_context,
            rope_theta: 10_000.0,
            rmsnorm_eps: 1e-6,
            dropout: 0.0,
            pad_token_id: special::PAD,
            unk_token_id: special::UNK,
            cls_token_id: special::CLS,
            sep_token_id: special::SEP,
            mask_token_id: special::MASK,
        }
    }

    /// `4·width` rounded up to a multiple of 8.
    pub fn default_ffn_hidden(width: usize) -> usize {
        (4 * width).div_ceil(8) * 8
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    pub fn special_ids(&self) -> [u32; 5] {
        [
            self.pad_token_id,
            self.unk_token_id,
            self.cls_token_id,
            self.sep_token_id,
            self.mask_token_id,
        ]
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special_ids().contains(&id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.width == 0 || self.num_heads == 0 || !self.width.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "width {} must be a positive multiple of num_heads {}",
                self.width, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.ffn_hidden == 0 || self.max_context == 0 {
            return Err(Error::config("ffn_hidden and max_context must be positive"));
        }
        if !(self.rope_theta > 0.0) || !(self.rmsnorm_eps >= 0.0) {
            return Err(Error::config("rope_theta must be positive and rmsnorm_eps non-negative"));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("dropout is not supported; set it to 0"));
        }
        let ids = self.special_ids();
        for (i, &a) in ids.iter().enumerate() {
            if a as usize >= self.vocab_size {
                return Err(Error::config(format!(
                    "special token id {a} must be below vocab_size {}",
                    self.vocab_size
                )));
            }
            if ids[..i].contains(&a) {
                return Err(Error::config(format!("special token id {a} is used twice")));
            }
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.width, self.ffn_hidden);
        let per_layer = 4 * d * d + 3 * d * f + 2 * d;
        v * d + self.depth * per_layer + d + d * v + v
    }

    /// Number of parameter tensors.
    pub fn tensor_count(&self) -> usize {
        1 + 9 * self.depth + 3
    }

    /// `key = value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("depth", self.depth.to_string()),
            ("width", self.width.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_context", self.max_context.to_string()),
            ("rope_theta", format!("{:?}", self.rope_theta)),
            ("rmsnorm_eps", format!("{:?}", self.rmsnorm_eps)),
            ("dropout", format!("{:?}", self.dropout)),
            ("pad_token_id", self.pad_token_id.to_string()),
            ("unk_token_id", self.unk_token_id.to_string()),
            ("cls_token_id", self.cls_token_id.to_string()),
            ("sep_token_id", self.sep_token_id.to_string()),
            ("mask_token_id", self.mask_token_id.to_string()),
        ]
    }

    /// Builds a config from parsed `key = value` pairs. `vocab_size` may be
    /// supplied separately when it comes from a vocabulary file.
    pub fn from_map(map: &BTreeMap<String, String>, vocab_size: Option<usize>) -> Result<Self> {
        fn get<V: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: Option<V>) -> Result<V> {
            match map.get(key) {
                Some(raw) => raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("invalid value for model.{key}: {raw:?}"))),
                None => default.ok_or_else(|| Error::config(format!("missing model.{key}"))),
            }
        }
        for key in map.keys() {
            if !Self::KEYS.contains(&key.as_str()) {
                return Err(Error::config(format!("unknown model key {key:?}")));
            }
        }
        let width: usize = get(map, "width", Some(64))?;
        let vocab_size = match vocab_size {
            Some(v) => {
                if let Some(raw) = map.get("vocab_size") {
                    if raw.trim() != v.to_string() {
                        return Err(Error::config(format!(
                            "model.vocab_size {raw} disagrees with vocabulary size {v}"
                        )));
                    }
                }
                v
            }
            None => get(map, "vocab_size", None)?,
        };
        let cfg = Self {
            depth: get(map, "depth", Some(4))?,
            width,
            num_heads: get(map, "num_heads", Some(4))?,
            ffn_hidden: get(map, "ffn_hidden", Some(Self::default_ffn_hidden(width)))?,
            vocab_size,
            max_context: get(map, "max_context", Some(1024))?,
            rope_theta: get(map, "rope_theta", Some(10_000.0))?,
            rmsnorm_eps: get(map, "rmsnorm_eps", Some(1e-6))?,
            dropout: get(map, "dropout", Some(0.0))?,
            pad_token_id: get(map, "pad_token_id", Some(special::PAD))?,
            unk_token_id: get(map, "unk_token_id", Some(special::UNK))?,
            cls_token_id: get(map, "cls_token_id", Some(special::CLS))?,
            sep_token_id: get(map, "sep_token_id", Some(special::SEP))?,
            mask_token_id: get(map, "mask_token_id", Some(special::MASK))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed config line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(&map, None)
    }

    const KEYS: [&'static str; 14] = [
        "depth",
        "width",
        "num_heads",
        "ffn_hidden",
        "vocab_size",
        "max_context",
        "rope_theta",
        "rmsnorm_eps",
        "dropout",
        "pad_token_id",
        "unk_token_id",
        "cls_token_id",
        "sep_token_id",
        "mask_token_id",
    ];

    /// Hash of every field that determines parameter shapes and numerics.
    /// `max_context` is excluded: extending the context keeps parameters
    /// compatible.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "max_context" {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffn_default_rounds_to_eight() {
        assert_eq!(ModelConfig::default_ffn_hidden(64), 256);
        assert_eq!(ModelConfig::default_ffn_hidden(30), 120);
        assert_eq!(ModelConfig::default_ffn_hidden(33), 136);
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut c = ModelConfig::toy(64);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(1, 6, 2, 64, 16);
        assert!(c.validate().is_err(), "head_dim 3 is odd");
        c.width = 8;
        assert!(c.validate().is_ok());
        c.vocab_size = 4;
        assert!(c.validate().is_err(), "mask id 4 out of range");
        let mut c = ModelConfig::toy(64);
        c.sep_token_id = c.cls_token_id;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(64);
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::new(2, 32, 2, 256, 1024);
        c.rmsnorm_eps = 1e-5;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.arch_hash(), c.arch_hash());
        c.max_context = 4096;
        assert_eq!(back.arch_hash(), c.arch_hash());
        c.width = 64;
        assert_ne!(back.arch_hash(), c.arch_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ModelConfig::from_kv("vocab_size = 64\nwidht = 3\n").is_err());
    }
}
