use serde::{Deserialize, Serialize};

use crate::error::{OrthrusError, Result};

/// Shape of the dual-view transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Base vocabulary size. The mask token takes id `vocab_size`.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Parallel block size `K`.
    pub block_size: usize,
    pub rope_base: f32,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            vocab_size: 16,
            max_seq_len: 512,
            block_size: 8,
            rope_base: 10_000.0,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mask_token_id(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Width of the logits rows: base vocabulary plus the mask column.
    pub fn logits_width(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OrthrusError::Config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("n_layers, n_heads and d_model must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !self.d_head().is_multiple_of(2) {
            return bad("d_head must be even for rotary encoding");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.block_size == 0 || self.block_size > self.max_seq_len {
            return bad("block_size must be in [1, max_seq_len]");
        }
        if !(self.rope_base > 0.0) {
            return bad("rope_base must be positive");
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive");
        }
        Ok(())
    }

    /// `key=value` lines with a `model.` prefix, in a fixed order.
    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("model.n_layers={}", self.n_layers),
            format!("model.n_heads={}", self.n_heads),
            format!("model.d_model={}", self.d_model),
            format!("model.vocab_size={}", self.vocab_size),
            format!("model.max_seq_len={}", self.max_seq_len),
            format!("model.block_size={}", self.block_size),
            format!("model.rope_base={}", self.rope_base),
            format!("model.mlp_hidden={}", self.mlp_hidden),
        ]
    }

    /// Apply one `model.*` key. Returns `Ok(false)` when the key is not a model key.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| OrthrusError::Config(format!("{key}: expected integer, got {v:?}")))
        };
        match key {
            "model.n_layers" => self.n_layers = num(value)?,
            "model.n_heads" => self.n_heads = num(value)?,
            "model.d_model" => self.d_model = num(value)?,
            "model.vocab_size" => self.vocab_size = num(value)?,
            "model.max_seq_len" => self.max_seq_len = num(value)?,
            "model.block_size" => self.block_size = num(value)?,
            "model.mlp_hidden" => self.mlp_hidden = num(value)?,
            "model.rope_base" => {
                self.rope_base = value.trim().parse().map_err(|_| {
                    OrthrusError::Config(format!("{key}: expected number, got {value:?}"))
                })?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_block_longer_than_context() {
        let cfg = ModelConfig {
            block_size: 600,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            n_layers: 3,
            rope_base: 500.5,
            ..Default::default()
        };
        let mut back = ModelConfig::default();
        for line in cfg.to_kv_lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set_kv(k, v).unwrap());
        }
        assert_eq!(cfg, back);
        assert_eq!(cfg.mask_token_id(), cfg.vocab_size as u32);
    }
}
