use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters and special-token ids of the mask-programmable backbone.
///
/// `block_len` is the draft/block size B: the number of tokens drafted per
/// diffusion block and carried per decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// FFN hidden size as a multiple of `d_model`.
    pub ffn_mult: f32,
    pub max_seq_len: usize,
    pub block_len: usize,
    pub mask_token_id: u32,
    pub bos_token_id: u32,
    pub eos_token_id: u32,
    pub pad_token_id: u32,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// Byte-level toy configuration: 256 raw bytes plus BOS/EOS/MASK/PAD.
    pub fn byte_level(d_model: usize, n_layers: usize, n_heads: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size: 260,
            d_model,
            n_layers,
            n_heads,
            ffn_mult: 4.0,
            max_seq_len: 256,
            block_len: 4,
            bos_token_id: 256,
            eos_token_id: 257,
            mask_token_id: 258,
            pad_token_id: 259,
            rng_seed: seed,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.d_model as f32 * self.ffn_mult).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("all sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model divisible by n_heads".into()));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config(
                "head dim must be even for rotary embedding".into(),
            ));
        }
        if self.block_len < 1 {
            return Err(Error::Config("block_len >= 1".into()));
        }
        if self.max_seq_len < 2 * self.block_len {
            return Err(Error::Config("max_seq_len >= 2*block_len".into()));
        }
        if self.ffn_hidden() == 0 {
            return Err(Error::Config("ffn_mult too small".into()));
        }
        let specials = [
            self.mask_token_id,
            self.bos_token_id,
            self.eos_token_id,
            self.pad_token_id,
        ];
        for (i, a) in specials.iter().enumerate() {
            if *a as usize >= self.vocab_size {
                return Err(Error::Config(
                    "special token ids must be < vocab_size".into(),
                ));
            }
            for b in specials.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::Config("special token ids must be distinct".into()));
                }
            }
        }
        Ok(())
    }
}
