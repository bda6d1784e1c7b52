//! Minimal mask-programmable transformer.
//!
//! The network has no implicit causality: every forward is driven by an
//! [`AttentionSpec`] carrying the dense allowed-key matrix and explicit
//! absolute positions, so the same weights serve the causal, diffusion, and
//! hybrid decode layouts. Rotary embedding is a pure function of the
//! per-token position index, which is what makes the decode-step reordering
//! legal.
//!
//! KV rows for every forwarded token are returned, never auto-appended: the
//! caller decides which rows enter the cache (carried tokens yes, mask
//! tokens never).

pub mod cache;
pub mod math;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::maskgen::AttentionSpec;
use cache::{KVCache, KvRows};
use params::ParamLayout;

/// Per-forwarded-token logit rows over the vocabulary.
#[derive(Debug, Clone)]
pub struct LogitsBundle {
    pub n_rows: usize,
    pub vocab: usize,
    data: Vec<f32>,
}

impl LogitsBundle {
    pub(crate) fn new(n_rows: usize, vocab: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), n_rows * vocab);
        LogitsBundle { n_rows, vocab, data }
    }

    /// Bundle from explicit rows; lets loss code be exercised on
    /// hand-written logits.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let vocab = rows.first().map(|r| r.len()).unwrap_or(0);
        assert!(rows.iter().all(|r| r.len() == vocab));
        LogitsBundle {
            n_rows: rows.len(),
            vocab,
            data: rows.concat(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: ModelConfig,
    layout: ParamLayout,
    params: Vec<f32>,
}

impl Backbone {
    /// Deterministic initialization from `cfg.rng_seed`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid stddev");
        let mut params = vec![0.0f32; layout.n_params];
        for (name, _, range) in layout.tensors(&cfg) {
            if name.ends_with("ln1") || name.ends_with("ln2") || name == "ln_f" {
                params[range].fill(1.0);
            } else {
                for p in &mut params[range] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        Ok(Backbone { cfg, layout, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        if params.len() != layout.n_params {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.n_params
            )));
        }
        Ok(Backbone { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn check_inputs(
        &self,
        tokens: &[u32],
        spec: &AttentionSpec,
        cache_len: usize,
    ) -> Result<()> {
        spec.validate()?;
        if tokens.len() != spec.n_query {
            return Err(Error::Spec(format!(
                "{} tokens but spec has {} query rows",
                tokens.len(),
                spec.n_query
            )));
        }
        if spec.n_key != cache_len + spec.n_query {
            return Err(Error::Spec(format!(
                "spec has {} keys but cache_len {} + {} queries",
                spec.n_key,
                cache_len,
                spec.n_query
            )));
        }
        for i in 0..cache_len {
            if spec.positions_k[i] != i + 1 {
                return Err(Error::Spec(format!(
                    "cache key {} must carry position {}",
                    i,
                    i + 1
                )));
            }
        }
        for &p in spec.positions_q.iter().chain(&spec.positions_k) {
            if p == 0 || p > self.cfg.max_seq_len {
                return Err(Error::Capacity(format!(
                    "position {} outside 1..={}",
                    p, self.cfg.max_seq_len
                )));
            }
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Spec(format!("token id {t} out of vocabulary")));
            }
        }
        Ok(())
    }

    /// Compute logits for `tokens` under `spec`, optionally attending a KV
    /// cache. Returns the logit rows plus the KV rows of every forwarded
    /// token so the caller can append the carried subset.
    pub fn forward(
        &self,
        tokens: &[u32],
        spec: &AttentionSpec,
        cache: Option<&KVCache>,
    ) -> Result<(LogitsBundle, KvRows)> {
        let cache_len = cache.map(|c| c.len()).unwrap_or(0);
        self.check_inputs(tokens, spec, cache_len)?;
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        let hidden = cfg.ffn_hidden();
        let n = tokens.len();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = vec![0.0f32; n * d];
        let emb = &self.params[self.layout.tok_emb.clone()];
        for (i, &t) in tokens.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        }

        let mut kv = KvRows {
            positions: spec.positions_q.clone(),
            k: Vec::with_capacity(cfg.n_layers),
            v: Vec::with_capacity(cfg.n_layers),
        };

        let mut q = vec![0.0f32; n * d];
        let mut k_new = vec![0.0f32; n * d];
        let mut v_new = vec![0.0f32; n * d];
        let mut attn = vec![0.0f32; n * d];
        let mut h_buf = vec![0.0f32; d];
        let mut fc1_out = vec![0.0f32; hidden];
        let mut mlp_out = vec![0.0f32; d];

        for (l, lo) in self.layout.layers.iter().enumerate() {
            let p = &self.params;
            let g1 = &p[lo.ln1.clone()];
            for i in 0..n {
                h_buf.copy_from_slice(&x[i * d..(i + 1) * d]);
                math::rmsnorm(&mut h_buf, g1);
                math::matvec(&p[lo.wq.clone()], &h_buf, d, d, &mut q[i * d..(i + 1) * d]);
                math::matvec(&p[lo.wk.clone()], &h_buf, d, d, &mut k_new[i * d..(i + 1) * d]);
                math::matvec(&p[lo.wv.clone()], &h_buf, d, d, &mut v_new[i * d..(i + 1) * d]);
                math::rotate(&mut q[i * d..(i + 1) * d], spec.positions_q[i], nh, hd);
                math::rotate(&mut k_new[i * d..(i + 1) * d], spec.positions_q[i], nh, hd);
            }
            let (k_cache, v_cache): (&[f32], &[f32]) = match cache {
                Some(c) => (c.layer_k(l), c.layer_v(l)),
                None => (&[], &[]),
            };
            let key_row = |kidx: usize| -> &[f32] {
                if kidx < cache_len {
                    &k_cache[kidx * d..(kidx + 1) * d]
                } else {
                    let j = kidx - cache_len;
                    &k_new[j * d..(j + 1) * d]
                }
            };
            let val_row = |kidx: usize| -> &[f32] {
                if kidx < cache_len {
                    &v_cache[kidx * d..(kidx + 1) * d]
                } else {
                    let j = kidx - cache_len;
                    &v_new[j * d..(j + 1) * d]
                }
            };
            attn.fill(0.0);
            let mut scores = vec![0.0f32; spec.n_key];
            for i in 0..n {
                for h in 0..nh {
                    let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
                    let mut max = f32::NEG_INFINITY;
                    for kidx in 0..spec.n_key {
                        if !spec.is_allowed(i, kidx) {
                            continue;
                        }
                        let kh = &key_row(kidx)[h * hd..(h + 1) * hd];
                        let mut s = 0.0f32;
                        for t in 0..hd {
                            s += qh[t] * kh[t];
                        }
                        let s = s * scale;
                        scores[kidx] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut denom = 0.0f32;
                    for kidx in 0..spec.n_key {
                        if spec.is_allowed(i, kidx) {
                            let e = (scores[kidx] - max).exp();
                            scores[kidx] = e;
                            denom += e;
                        }
                    }
                    let out = &mut attn[i * d + h * hd..i * d + (h + 1) * hd];
                    for kidx in 0..spec.n_key {
                        if !spec.is_allowed(i, kidx) {
                            continue;
                        }
                        let w = scores[kidx] / denom;
                        let vh = &val_row(kidx)[h * hd..(h + 1) * hd];
                        for t in 0..hd {
                            out[t] += w * vh[t];
                        }
                    }
                }
            }
            // o-projection + residual, then MLP + residual
            let g2 = &p[lo.ln2.clone()];
            for i in 0..n {
                math::matvec(&p[lo.wo.clone()], &attn[i * d..(i + 1) * d], d, d, &mut h_buf);
                for t in 0..d {
                    x[i * d + t] += h_buf[t];
                }
                h_buf.copy_from_slice(&x[i * d..(i + 1) * d]);
                math::rmsnorm(&mut h_buf, g2);
                math::matvec(&p[lo.fc1.clone()], &h_buf, hidden, d, &mut fc1_out);
                for z in fc1_out.iter_mut() {
                    *z = math::silu(*z);
                }
                math::matvec(&p[lo.fc2.clone()], &fc1_out, d, hidden, &mut mlp_out);
                for t in 0..d {
                    x[i * d + t] += mlp_out[t];
                }
            }
            kv.k.push(k_new.clone());
            kv.v.push(v_new.clone());
        }

        let g_f = &self.params[self.layout.ln_f.clone()];
        let w_head = &self.params[self.layout.lm_head.clone()];
        let mut logits = vec![0.0f32; n * cfg.vocab_size];
        for i in 0..n {
            h_buf.copy_from_slice(&x[i * d..(i + 1) * d]);
            math::rmsnorm(&mut h_buf, g_f);
            math::matvec(
                w_head,
                &h_buf,
                cfg.vocab_size,
                d,
                &mut logits[i * cfg.vocab_size..(i + 1) * cfg.vocab_size],
            );
        }
        Ok((LogitsBundle::new(n, cfg.vocab_size, logits), kv))
    }

    /// Fresh cache sized for this model.
    pub fn new_cache(&self) -> KVCache {
        KVCache::new(self.cfg.n_layers, self.cfg.d_model)
    }
}
