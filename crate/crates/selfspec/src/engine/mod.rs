//! The draft-and-verify decoding state machine.
//!
//! Every decode step forwards `q_len = B * (1 + B)` tokens in one pass: the
//! B carried tokens (slot 1 is the committed-pending token, slots 2..B are
//! speculative diffusion drafts) followed by B pre-draft mask blocks, one
//! per possible accepted carried count. Carried tokens are verified by
//! greedy argmax against the mixed AR/diffusion logits; the pre-draft block
//! matching the accepted prefix supplies the next step's drafts. KV rows of
//! carried tokens are cached immediately and the rejected suffix is evicted,
//! so no token is ever forwarded causally twice.

pub mod baselines;

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::backbone::cache::KVCache;
use crate::backbone::{math, Backbone, LogitsBundle};
use crate::error::{Error, Result};
use crate::maskgen::{
    build_decode_template, build_prefill_spec, positions_for_step, slice_decode_spec,
    DecodeTemplate,
};

/// Verifier knobs: logit mixing weight beta (1 = trust AR, 0 = trust
/// diffusion) and the greedy (temperature 0) sampling defaults.
#[derive(Debug, Clone, Serialize)]
pub struct VerifierConfig {
    pub beta: f32,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub stop_on_eos: bool,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            beta: 1.0,
            temperature: 0.0,
            max_new_tokens: 64,
            stop_on_eos: true,
        }
    }
}

impl VerifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("beta must be in [0, 1]".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.temperature != 0.0 {
            // Stochastic (Leviathan-style) acceptance is a documented
            // extension point; only greedy verification is implemented.
            return Err(Error::Config(
                "only temperature 0 (greedy) verification is supported".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Convex logit mixing: `beta * ar + (1 - beta) * diff`, elementwise.
pub fn mix_logits(ar_row: &[f32], diff_row: &[f32], beta: f32) -> Vec<f32> {
    debug_assert_eq!(ar_row.len(), diff_row.len());
    ar_row
        .iter()
        .zip(diff_row)
        .map(|(a, d)| beta * a + (1.0 - beta) * d)
        .collect()
}

/// Per-generation accounting.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationStats {
    /// Model forwards, prefill included.
    pub nfe: usize,
    /// Committed tokens, prompt excluded.
    pub committed_tokens: usize,
    /// Histogram of per-step accepted carried counts: index `a - 1` counts
    /// steps that committed `a` tokens.
    pub accepted_hist: Vec<usize>,
    /// KV rows ever appended (prompt + B per step) and evicted.
    pub kv_appended: usize,
    pub kv_evicted: usize,
    /// Generation hit the position capacity before finishing.
    pub truncated: bool,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl GenerationStats {
    fn new(block_len: usize) -> Self {
        GenerationStats {
            nfe: 0,
            committed_tokens: 0,
            accepted_hist: vec![0; block_len],
            kv_appended: 0,
            kv_evicted: 0,
            truncated: false,
            wall_time: Duration::ZERO,
        }
    }

    pub fn tokens_per_nfe(&self) -> f64 {
        if self.nfe == 0 {
            0.0
        } else {
            self.committed_tokens as f64 / self.nfe as f64
        }
    }
}

/// In-flight decoding state: the committed prefix (prompt included), the KV
/// cache of everything except the pending token, and the carried block.
#[derive(Debug)]
pub struct DecodeState {
    pub committed: Vec<u32>,
    pub cache: KVCache,
    /// Slot 0 is the committed-pending token (in `committed`, not yet in the
    /// cache); slots 1..B are speculative drafts.
    pub carried: Vec<u32>,
    pub stats: GenerationStats,
    pub finished: bool,
    prompt_len: usize,
}

impl DecodeState {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Generated tokens (committed minus prompt).
    pub fn output(&self) -> &[u32] {
        &self.committed[self.prompt_len..]
    }
}

/// One decode step, for tracing and golden tests.
#[derive(Debug, Clone, Serialize)]
pub struct StepTrace {
    pub nfe: usize,
    pub cache_len: usize,
    pub carried: Vec<u32>,
    pub accepted: usize,
    pub correction: u32,
    pub evicted: usize,
}

pub struct HybridDecoder<'a> {
    backbone: &'a Backbone,
    template: DecodeTemplate,
    vcfg: VerifierConfig,
    block_len: usize,
}

impl<'a> HybridDecoder<'a> {
    /// Decoder with draft/block length `block_len` (independent of the
    /// block length the model was trained with).
    pub fn new(backbone: &'a Backbone, block_len: usize, vcfg: VerifierConfig) -> Result<Self> {
        vcfg.validate()?;
        if block_len < 1 {
            return Err(Error::Config("block_len must be >= 1".into()));
        }
        let max_seq_len = backbone.config().max_seq_len;
        if 2 * block_len > max_seq_len {
            return Err(Error::Capacity(
                "block_len too large for max_seq_len".into(),
            ));
        }
        Ok(HybridDecoder {
            backbone,
            template: build_decode_template(block_len, max_seq_len),
            vcfg,
            block_len,
        })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    fn argmax_mixed(&self, bundle: &LogitsBundle, ar_row: usize, diff_row: usize) -> u32 {
        let mixed = mix_logits(bundle.row(ar_row), bundle.row(diff_row), self.vcfg.beta);
        math::argmax(&mixed) as u32
    }

    /// Encode the prompt causally and one-step-draft the first block: the
    /// mixed AR/diffusion logits at the first free position commit the first
    /// token; the remaining mask rows become speculative drafts.
    pub fn prefill(&self, prompt: &[u32]) -> Result<DecodeState> {
        let cfg = self.backbone.config();
        let b = self.block_len;
        if prompt.is_empty() {
            return Err(Error::Config("prompt must be non-empty".into()));
        }
        if prompt.len() + 2 * b > cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "prompt length {} + 2B ({}) exceeds max_seq_len {}",
                prompt.len(),
                2 * b,
                cfg.max_seq_len
            )));
        }
        let n = prompt.len();
        let spec = build_prefill_spec(n, b, cfg.max_seq_len)?;
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat(cfg.mask_token_id).take(b));
        let (bundle, kv) = self.backbone.forward(&tokens, &spec, None)?;
        let mut cache = self.backbone.new_cache();
        cache.append(&kv, n)?;
        let first = self.argmax_mixed(&bundle, n - 1, n);
        let mut carried = vec![first];
        for i in 1..b {
            carried.push(math::argmax(bundle.row(n + i)) as u32);
        }
        let mut stats = GenerationStats::new(b);
        stats.nfe = 1;
        stats.committed_tokens = 1;
        stats.kv_appended = n;
        let mut committed = prompt.to_vec();
        committed.push(first);
        let finished = (self.vcfg.stop_on_eos && first == cfg.eos_token_id)
            || self.vcfg.max_new_tokens <= 1;
        Ok(DecodeState {
            committed,
            cache,
            carried,
            stats,
            finished,
            prompt_len: n,
        })
    }

    /// One draft-and-verify step. Returns the accepted carried count `a`
    /// (tokens committed this step), in `[1, B]`.
    pub fn decode_step(
        &self,
        state: &mut DecodeState,
        trace: Option<&mut Vec<StepTrace>>,
    ) -> Result<usize> {
        let cfg = self.backbone.config();
        let b = self.block_len;
        let n = state.cache.len();
        if n + 2 * b > cfg.max_seq_len {
            state.stats.truncated = true;
            state.finished = true;
            return Ok(0);
        }
        let carried_in = state.carried.clone();

        // 1. Assemble the q_len tokens and sliced spec.
        let mut tokens = state.carried.clone();
        tokens.extend(std::iter::repeat(cfg.mask_token_id).take(b * b));
        let spec = slice_decode_spec(&self.template, n)?;
        debug_assert_eq!(spec.positions_q, positions_for_step(n, b));

        // 2. Forward; cache only the carried (causal) rows.
        let (bundle, kv) = self.backbone.forward(&tokens, &spec, Some(&state.cache))?;
        state.cache.append(&kv, b)?;
        state.stats.kv_appended += b;

        // 3. Verifier tokens: mixed logits at each carried position's output.
        let verified: Vec<u32> = (1..=b)
            .map(|j| {
                self.argmax_mixed(
                    &bundle,
                    self.template.carried_row(j),
                    self.template.block_row(j, 1),
                )
            })
            .collect();

        // 4. Greedy rejection scan over the speculative slots.
        let mut accepted = b;
        for j in 1..b {
            if verified[j - 1] != state.carried[j] {
                accepted = j;
                break;
            }
        }
        let correction = verified[accepted - 1];

        // 5-6. Commit accepted slots plus the correction/bonus; evict the
        // rejected carried suffix. The correction is never cached here: it
        // rides causally as slot 1 of the next step.
        for j in 1..accepted {
            state.committed.push(state.carried[j]);
        }
        state.committed.push(correction);
        state.cache.evict_to(n + accepted)?;
        state.stats.kv_evicted += b - accepted;

        // 7. Pre-draft proposal conditioned on exactly the accepted prefix.
        let mut carried = vec![correction];
        for i in 2..=b {
            carried.push(math::argmax(bundle.row(self.template.block_row(accepted, i))) as u32);
        }
        state.carried = carried;

        // 8. Accounting and stop conditions.
        state.stats.nfe += 1;
        state.stats.committed_tokens += accepted;
        state.stats.accepted_hist[accepted - 1] += 1;
        if let Some(trace) = trace {
            trace.push(StepTrace {
                nfe: state.stats.nfe,
                cache_len: state.cache.len(),
                carried: carried_in,
                accepted,
                correction,
                evicted: b - accepted,
            });
        }
        if self.vcfg.stop_on_eos {
            if let Some(eos_at) = state.committed[state.prompt_len..]
                .iter()
                .position(|&t| t == cfg.eos_token_id)
            {
                state.committed.truncate(state.prompt_len + eos_at + 1);
                state.stats.committed_tokens = eos_at + 1;
                state.finished = true;
            }
        }
        if !state.finished && state.committed.len() - state.prompt_len >= self.vcfg.max_new_tokens
        {
            state.committed
                .truncate(state.prompt_len + self.vcfg.max_new_tokens);
            state.stats.committed_tokens = self.vcfg.max_new_tokens;
            state.finished = true;
        }
        Ok(accepted)
    }

    /// Prefill-then-step loop; returns the generated tokens (prompt
    /// excluded) and stats.
    pub fn generate(&self, prompt: &[u32]) -> Result<(Vec<u32>, GenerationStats)> {
        self.generate_traced(prompt, None)
    }

    pub fn generate_traced(
        &self,
        prompt: &[u32],
        mut trace: Option<&mut Vec<StepTrace>>,
    ) -> Result<(Vec<u32>, GenerationStats)> {
        let start = Instant::now();
        let mut state = self.prefill(prompt)?;
        while !state.finished {
            self.decode_step(&mut state, trace.as_deref_mut())?;
        }
        let mut stats = state.stats.clone();
        stats.wall_time = start.elapsed();
        Ok((state.output().to_vec(), stats))
    }
}
