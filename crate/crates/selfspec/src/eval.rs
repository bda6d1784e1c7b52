//! Likelihood scoring and task accuracy. Scoring runs the backbone as a
//! plain causal LM, so one forward covers the whole continuation.

use serde::Serialize;

use crate::backbone::{math, Backbone};
use crate::engine::GenerationStats;
use crate::error::{Error, Result};
use crate::maskgen::AttentionSpec;
use crate::training::corpus::{bytes_to_tokens, tokens_to_string};

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub total_loglik: f64,
    pub token_logprobs: Vec<f64>,
    /// Forwards spent: always 1, the continuation is scored in one pass.
    pub nfe_used: usize,
}

/// Log-likelihood of `continuation` given `prompt` under causal attention.
pub fn score_loglik(
    backbone: &Backbone,
    prompt: &[u32],
    continuation: &[u32],
) -> Result<ScoreReport> {
    let cfg = backbone.config();
    if prompt.is_empty() {
        return Err(Error::Config("prompt must be non-empty".into()));
    }
    if continuation.is_empty() {
        return Ok(ScoreReport {
            total_loglik: 0.0,
            token_logprobs: Vec::new(),
            nfe_used: 0,
        });
    }
    let n = prompt.len() + continuation.len();
    if n > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "scored sequence length {} exceeds max_seq_len {}",
            n, cfg.max_seq_len
        )));
    }
    let tokens: Vec<u32> = prompt.iter().chain(continuation).copied().collect();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..=q {
            allowed[q * n + k] = true;
        }
    }
    let positions: Vec<usize> = (1..=n).collect();
    let spec = AttentionSpec {
        n_query: n,
        n_key: n,
        allowed,
        positions_q: positions.clone(),
        positions_k: positions,
    };
    let (bundle, _) = backbone.forward(&tokens, &spec, None)?;
    let mut token_logprobs = Vec::with_capacity(continuation.len());
    for (i, &t) in continuation.iter().enumerate() {
        // Row p - 1 predicts token p + 1; continuation token i sits at
        // index prompt.len() + i.
        let row = bundle.row(prompt.len() + i - 1);
        token_logprobs.push(math::log_softmax_at(row, t as usize));
    }
    Ok(ScoreReport {
        total_loglik: token_logprobs.iter().sum(),
        token_logprobs,
        nfe_used: 1,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub n_tasks: usize,
    pub n_exact: usize,
    pub accuracy: f64,
    pub total_tokens: usize,
    pub total_nfe: usize,
    pub tokens_per_nfe: f64,
}

/// Exact-match accuracy and throughput of a decoder over byte-level
/// prompt/expected pairs. Prompts are BOS-prefixed; the generated tokens
/// must decode (EOS stripped) to exactly the expected string.
pub fn task_accuracy<F>(
    tasks: &[(String, String)],
    bos_token_id: u32,
    eos_token_id: u32,
    mut decode: F,
) -> Result<TaskReport>
where
    F: FnMut(&[u32]) -> Result<(Vec<u32>, GenerationStats)>,
{
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to evaluate".into()));
    }
    let mut n_exact = 0;
    let mut total_tokens = 0;
    let mut total_nfe = 0;
    for (prompt, expected) in tasks {
        let mut prompt_toks = vec![bos_token_id];
        prompt_toks.extend(bytes_to_tokens(prompt));
        let (out, stats) = decode(&prompt_toks)?;
        total_tokens += stats.committed_tokens;
        total_nfe += stats.nfe;
        let text: Vec<u32> = out
            .iter()
            .copied()
            .take_while(|&t| t != eos_token_id)
            .collect();
        if tokens_to_string(&text) == *expected {
            n_exact += 1;
        }
    }
    Ok(TaskReport {
        n_tasks: tasks.len(),
        n_exact,
        accuracy: n_exact as f64 / tasks.len() as f64,
        total_tokens,
        total_nfe,
        tokens_per_nfe: total_tokens as f64 / total_nfe as f64,
    })
}
