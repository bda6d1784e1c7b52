//! Forward-pass latency micro-benchmark: fixed cached prefix, varying query
//! width, median wall time over repeated runs.

use std::time::Instant;

use serde::Serialize;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::maskgen::AttentionSpec;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub prefix_len: usize,
    pub q_len: usize,
    pub reps: usize,
    pub median_seconds: f64,
}

const WARMUP_RUNS: usize = 3;

/// Median latency of one forward of `q_len` mask queries against a cached
/// causal prefix of `prefix_len` tokens. The first runs warm up and are
/// discarded; at least 20 timed reps are required.
pub fn bench_forward(
    backbone: &Backbone,
    prefix_len: usize,
    q_len: usize,
    reps: usize,
) -> Result<BenchRow> {
    let cfg = backbone.config();
    if reps < 20 {
        return Err(Error::Config("bench reps must be >= 20".into()));
    }
    if prefix_len < 1 || q_len < 1 {
        return Err(Error::Config("prefix_len and q_len must be >= 1".into()));
    }
    if prefix_len + q_len > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "prefix {} + queries {} exceeds max_seq_len {}",
            prefix_len, q_len, cfg.max_seq_len
        )));
    }

    let prefix: Vec<u32> = (0..prefix_len).map(|i| (i % 256) as u32).collect();
    let mut allowed = vec![false; prefix_len * prefix_len];
    for q in 0..prefix_len {
        for k in 0..=q {
            allowed[q * prefix_len + k] = true;
        }
    }
    let positions: Vec<usize> = (1..=prefix_len).collect();
    let prefix_spec = AttentionSpec {
        n_query: prefix_len,
        n_key: prefix_len,
        allowed,
        positions_q: positions.clone(),
        positions_k: positions,
    };
    let (_, kv) = backbone.forward(&prefix, &prefix_spec, None)?;
    let mut cache = backbone.new_cache();
    cache.append(&kv, prefix_len)?;

    let tokens = vec![cfg.mask_token_id; q_len];
    let n_key = prefix_len + q_len;
    let positions_q: Vec<usize> = (prefix_len + 1..=prefix_len + q_len).collect();
    let mut positions_k: Vec<usize> = (1..=prefix_len).collect();
    positions_k.extend(positions_q.iter().copied());
    let spec = AttentionSpec {
        n_query: q_len,
        n_key,
        allowed: vec![true; q_len * n_key],
        positions_q,
        positions_k,
    };

    for _ in 0..WARMUP_RUNS {
        backbone.forward(&tokens, &spec, Some(&cache))?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        backbone.forward(&tokens, &spec, Some(&cache))?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        0.5 * (times[reps / 2 - 1] + times[reps / 2])
    };
    Ok(BenchRow {
        prefix_len,
        q_len,
        reps,
        median_seconds: median,
    })
}
