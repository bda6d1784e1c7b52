//! Exact per-layer KV cache with suffix eviction.
//!
//! The cache mirrors the committed causal prefix: entry `i` (0-based) is the
//! key/value of the token at absolute position `i + 1`, identical to what a
//! scratch causal forward would compute. Rows are appended by the caller
//! (the backbone never self-appends) and eviction only removes a suffix.

use crate::error::{Error, Result};

/// Key/value rows produced by one forward, per layer, ordered like the
/// forwarded tokens. `positions[i]` is the absolute position of row `i`.
#[derive(Debug, Clone)]
pub struct KvRows {
    pub positions: Vec<usize>,
    /// Per layer, `[n_tokens * d_model]` keys (rotary already applied).
    pub k: Vec<Vec<f32>>,
    /// Per layer, `[n_tokens * d_model]` values.
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct KVCache {
    n_layers: usize,
    d_model: usize,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    cache_len: usize,
}

impl KVCache {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        KVCache {
            n_layers,
            d_model,
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            cache_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.cache_len
    }

    pub fn is_empty(&self) -> bool {
        self.cache_len == 0
    }

    pub fn layer_k(&self, l: usize) -> &[f32] {
        &self.k[l]
    }

    pub fn layer_v(&self, l: usize) -> &[f32] {
        &self.v[l]
    }

    /// Append the first `count_to_keep` rows (the carried/causal tokens).
    /// Rows must continue the cache contiguously: row `i` at position
    /// `cache_len + 1 + i`.
    pub fn append(&mut self, rows: &KvRows, count_to_keep: usize) -> Result<()> {
        if count_to_keep > rows.positions.len() {
            return Err(Error::Range(format!(
                "asked to keep {} of {} rows",
                count_to_keep,
                rows.positions.len()
            )));
        }
        if rows.k.len() != self.n_layers {
            return Err(Error::CacheConsistency("layer count mismatch".into()));
        }
        for i in 0..count_to_keep {
            let want = self.cache_len + 1 + i;
            if rows.positions[i] != want {
                return Err(Error::CacheConsistency(format!(
                    "row {} has position {} but cache expects {}",
                    i, rows.positions[i], want
                )));
            }
        }
        let d = self.d_model;
        for l in 0..self.n_layers {
            self.k[l].extend_from_slice(&rows.k[l][..count_to_keep * d]);
            self.v[l].extend_from_slice(&rows.v[l][..count_to_keep * d]);
        }
        self.cache_len += count_to_keep;
        Ok(())
    }

    /// Drop every entry past `new_len`; retained entries are untouched.
    pub fn evict_to(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.cache_len {
            return Err(Error::Range(format!(
                "evict_to({}) beyond cache_len {}",
                new_len, self.cache_len
            )));
        }
        let d = self.d_model;
        for l in 0..self.n_layers {
            self.k[l].truncate(new_len * d);
            self.v[l].truncate(new_len * d);
        }
        self.cache_len = new_len;
        Ok(())
    }
}
