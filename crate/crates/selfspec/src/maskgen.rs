//! Attention-spec construction and slicing.
//!
//! Everything the backbone knows about causality comes from an explicit
//! [`AttentionSpec`]: a dense boolean allowed-key matrix plus absolute
//! position indices per token. This module builds the three layouts the
//! hybrid decoder needs:
//!
//! - the training mask (clean tokens causal, appended mask blocks
//!   block-bidirectional over the clean prefix),
//! - the prefill mask (causal prompt plus one bidirectional draft block),
//! - the reusable decode template (B carried tokens plus B pre-draft blocks,
//!   sliced per step against the cached prefix).
//!
//! Positions are 1-based absolute indices; cache entry `i` (0-based) always
//! holds the token at position `i + 1`.

use crate::error::{Error, Result};

/// Dense attention description for one forward: which keys each query may
/// attend, and the absolute position of every query and key token.
///
/// When a KV cache is in play the key axis is ordered cache keys first
/// (positions `1..=cache_len`), then the current-forward tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub n_query: usize,
    pub n_key: usize,
    /// Row-major `[n_query x n_key]`.
    pub allowed: Vec<bool>,
    pub positions_q: Vec<usize>,
    pub positions_k: Vec<usize>,
}

impl AttentionSpec {
    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n_key + k]
    }

    fn set(&mut self, q: usize, k: usize) {
        self.allowed[q * self.n_key + k] = true;
    }

    fn empty(n_query: usize, n_key: usize) -> Self {
        AttentionSpec {
            n_query,
            n_key,
            allowed: vec![false; n_query * n_key],
            positions_q: vec![0; n_query],
            positions_k: vec![0; n_key],
        }
    }

    /// Shape and reachability checks shared by every consumer.
    pub fn validate(&self) -> Result<()> {
        if self.allowed.len() != self.n_query * self.n_key
            || self.positions_q.len() != self.n_query
            || self.positions_k.len() != self.n_key
        {
            return Err(Error::Spec("shape mismatch".into()));
        }
        for q in 0..self.n_query {
            if !self.allowed[q * self.n_key..(q + 1) * self.n_key]
                .iter()
                .any(|&a| a)
            {
                return Err(Error::Spec(format!("all-false attention row {q}")));
            }
        }
        Ok(())
    }

    /// Number of allowed keys per query row; handy as a golden fixture.
    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.n_query)
            .map(|q| (0..self.n_key).filter(|&k| self.is_allowed(q, k)).count())
            .collect()
    }

    /// Portable grid dump ('1'/'0' cells, one row per line) for golden files.
    pub fn to_grid_csv(&self) -> String {
        let mut out = String::new();
        for q in 0..self.n_query {
            let row: Vec<&str> = (0..self.n_key)
                .map(|k| if self.is_allowed(q, k) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Training layout over `2S-1` tokens: S clean tokens at positions `1..=S`
/// followed by `S-1` mask tokens covering positions `2..=S`, tiled into
/// blocks of `block_len` starting at position 2.
#[derive(Debug, Clone)]
pub struct TrainingSpec {
    pub s: usize,
    pub block_len: usize,
    pub spec: AttentionSpec,
}

impl TrainingSpec {
    /// Row index of clean token at position `p` (1-based).
    pub fn clean_row(&self, p: usize) -> usize {
        debug_assert!((1..=self.s).contains(&p));
        p - 1
    }

    /// Row index of the mask token covering position `p` (2-based through S).
    pub fn mask_row(&self, p: usize) -> usize {
        debug_assert!((2..=self.s).contains(&p));
        self.s + (p - 2)
    }

    /// AR label for clean row `p`: the token at position `p + 1`.
    pub fn ar_label_position(&self, p: usize) -> usize {
        p + 1
    }

    /// Diffusion label for the mask row covering position `p`: the token at `p`.
    pub fn diff_label_position(&self, p: usize) -> usize {
        p
    }
}

/// First position covered by diffusion block `b` (1-based blocks, tiling
/// positions `2..=S` in runs of `block_len`).
pub fn block_start(b: usize, block_len: usize) -> usize {
    2 + (b - 1) * block_len
}

/// Build the training mask for sequence length `s` and block length `b`.
///
/// Clean row `p` attends clean columns `1..=p`. The mask row covering
/// position `p` in block `blk` attends clean columns `1..block_start(blk)`
/// plus every mask column of its own block. No clean row ever attends a mask
/// column.
pub fn build_training_spec(s: usize, b: usize) -> Result<TrainingSpec> {
    if s < 2 {
        return Err(Error::Config("training sequence length must be >= 2".into()));
    }
    if b < 1 {
        return Err(Error::Config("block length must be >= 1".into()));
    }
    if (s - 1) % b != 0 {
        return Err(Error::Batching(format!(
            "S-1 = {} must be divisible by block length {}",
            s - 1,
            b
        )));
    }
    let n = 2 * s - 1;
    let mut spec = AttentionSpec::empty(n, n);
    for p in 1..=s {
        spec.positions_q[p - 1] = p;
        spec.positions_k[p - 1] = p;
        for c in 1..=p {
            spec.set(p - 1, c - 1);
        }
    }
    for p in 2..=s {
        let row = s + (p - 2);
        spec.positions_q[row] = p;
        spec.positions_k[row] = p;
        let blk = (p - 2) / b + 1;
        let start = block_start(blk, b);
        // clean prefix strictly before the block
        for c in 1..start {
            spec.set(row, c - 1);
        }
        // own block, bidirectional
        for q in start..start + b {
            spec.set(row, s + (q - 2));
        }
    }
    Ok(TrainingSpec {
        s,
        block_len: b,
        spec,
    })
}

/// Prefill mask: `n_prompt` causal prompt rows followed by one block of
/// `b` mask rows (positions `n+1..=n+b`) that attend the whole prompt and
/// each other.
pub fn build_prefill_spec(n_prompt: usize, b: usize, max_seq_len: usize) -> Result<AttentionSpec> {
    if n_prompt < 1 {
        return Err(Error::Config("prompt must be non-empty".into()));
    }
    if n_prompt + b > max_seq_len {
        return Err(Error::Capacity(format!(
            "prefill needs {} positions but max_seq_len is {}",
            n_prompt + b,
            max_seq_len
        )));
    }
    let n = n_prompt + b;
    let mut spec = AttentionSpec::empty(n, n);
    for i in 0..n {
        spec.positions_q[i] = i + 1;
        spec.positions_k[i] = i + 1;
    }
    for p in 0..n_prompt {
        for c in 0..=p {
            spec.set(p, c);
        }
    }
    for m in n_prompt..n {
        for c in 0..n_prompt {
            spec.set(m, c);
        }
        for c in n_prompt..n {
            spec.set(m, c);
        }
    }
    Ok(spec)
}

/// Pre-initialized prefill mask of shape `(max_seq_len + b)^2`; sliced by
/// prompt length instead of rebuilt per sample.
#[derive(Debug, Clone)]
pub struct PrefillTemplate {
    pub block_len: usize,
    pub max_seq_len: usize,
    allowed: Vec<bool>,
}

impl PrefillTemplate {
    pub fn build(b: usize, max_seq_len: usize) -> Self {
        let n = max_seq_len + b;
        let mut allowed = vec![false; n * n];
        for p in 0..max_seq_len {
            for c in 0..=p {
                allowed[p * n + c] = true;
            }
        }
        for m in max_seq_len..n {
            for c in 0..n {
                allowed[m * n + c] = true;
            }
        }
        PrefillTemplate {
            block_len: b,
            max_seq_len,
            allowed,
        }
    }

    /// Slice for prompt length `n_prompt`; equals
    /// [`build_prefill_spec`] exactly.
    pub fn slice(&self, n_prompt: usize) -> Result<AttentionSpec> {
        if n_prompt < 1 {
            return Err(Error::Config("prompt must be non-empty".into()));
        }
        if n_prompt + self.block_len > self.max_seq_len {
            return Err(Error::Capacity("prompt too long for prefill template".into()));
        }
        let b = self.block_len;
        let big = self.max_seq_len + b;
        let n = n_prompt + b;
        let mut spec = AttentionSpec::empty(n, n);
        let keep_row = |i: usize| if i < n_prompt { i } else { self.max_seq_len + (i - n_prompt) };
        for q in 0..n {
            spec.positions_q[q] = q + 1;
            spec.positions_k[q] = q + 1;
            let src_q = keep_row(q);
            for k in 0..n {
                let src_k = keep_row(k);
                if self.allowed[src_q * big + src_k] {
                    spec.set(q, k);
                }
            }
        }
        Ok(spec)
    }
}

/// Reusable decode mask of shape `[q_len x (q_len + max_seq_len)]` with
/// `q_len = B * (1 + B)`.
///
/// Row/column layout of the q-part: carried tokens `1..=B`, then B pre-draft
/// blocks of B mask tokens; the `max_seq_len` prefix columns come last so a
/// per-step slice is a column-range selection. Carried row `j` attends the
/// prefix and carried columns `1..=j`; block-`j` mask rows additionally
/// attend every column of block `j` and nothing else.
#[derive(Debug, Clone)]
pub struct DecodeTemplate {
    pub block_len: usize,
    pub max_seq_len: usize,
    /// Row-major `[q_len x (q_len + max_seq_len)]`.
    allowed: Vec<bool>,
}

impl DecodeTemplate {
    pub fn q_len(&self) -> usize {
        self.block_len * (1 + self.block_len)
    }

    /// Row index (0-based) of carried token `j` (1-based).
    pub fn carried_row(&self, j: usize) -> usize {
        debug_assert!((1..=self.block_len).contains(&j));
        j - 1
    }

    /// Row index (0-based) of mask token `i` of pre-draft block `j` (both 1-based).
    pub fn block_row(&self, j: usize, i: usize) -> usize {
        debug_assert!((1..=self.block_len).contains(&j));
        debug_assert!((1..=self.block_len).contains(&i));
        self.block_len + (j - 1) * self.block_len + (i - 1)
    }
}

/// Build the decode template once at engine initialization.
pub fn build_decode_template(b: usize, max_seq_len: usize) -> DecodeTemplate {
    let q_len = b * (1 + b);
    let n_col = q_len + max_seq_len;
    let mut t = DecodeTemplate {
        block_len: b,
        max_seq_len,
        allowed: vec![false; q_len * n_col],
    };
    let mut set = |r: usize, c: usize| t.allowed[r * n_col + c] = true;
    for j in 1..=b {
        let row = j - 1;
        for c in q_len..n_col {
            set(row, c);
        }
        for c in 1..=j {
            set(row, c - 1);
        }
    }
    for j in 1..=b {
        for i in 1..=b {
            let row = b + (j - 1) * b + (i - 1);
            for c in q_len..n_col {
                set(row, c);
            }
            for c in 1..=j {
                set(row, c - 1);
            }
            for k in 1..=b {
                set(row, b + (j - 1) * b + (k - 1));
            }
        }
    }
    t
}

/// Slice the decode template for prefix length `n`: all `q_len` rows, the
/// first `n` prefix columns (reordered to the front, matching the cache-first
/// key convention), then the `q_len` self-columns.
pub fn slice_decode_spec(template: &DecodeTemplate, n: usize) -> Result<AttentionSpec> {
    let b = template.block_len;
    if n + b > template.max_seq_len {
        return Err(Error::Capacity(format!(
            "prefix length {} leaves no room for {} carried tokens (max_seq_len {})",
            n, b, template.max_seq_len
        )));
    }
    let q_len = template.q_len();
    let n_col_t = q_len + template.max_seq_len;
    let positions_q = positions_for_step(n, b);
    let mut spec = AttentionSpec::empty(q_len, n + q_len);
    for (q, &p) in positions_q.iter().enumerate() {
        spec.positions_q[q] = p;
        spec.positions_k[n + q] = p;
    }
    for k in 0..n {
        spec.positions_k[k] = k + 1;
    }
    for q in 0..q_len {
        let row = &template.allowed[q * n_col_t..(q + 1) * n_col_t];
        for k in 0..n {
            if row[q_len + k] {
                spec.set(q, k);
            }
        }
        for k in 0..q_len {
            if row[k] {
                spec.set(q, n + k);
            }
        }
    }
    Ok(spec)
}

/// Absolute positions of the `q_len` forwarded tokens at prefix length `n`:
/// carried token `j` sits at `n + j`; mask `i` of pre-draft block `j` sits at
/// `n + j + i`. Block `j`'s first mask therefore shares its predicted
/// position with carried token `j`'s next-token output.
pub fn positions_for_step(n: usize, b: usize) -> Vec<usize> {
    let mut pos = Vec::with_capacity(b * (1 + b));
    for j in 1..=b {
        pos.push(n + j);
    }
    for j in 1..=b {
        for i in 1..=b {
            pos.push(n + j + i);
        }
    }
    pos
}

/// Direct (non-template) construction of the per-step decode spec; the
/// template slice must equal this exactly.
pub fn build_decode_spec_direct(n: usize, b: usize, max_seq_len: usize) -> Result<AttentionSpec> {
    if n + b > max_seq_len {
        return Err(Error::Capacity("prefix too long".into()));
    }
    let q_len = b * (1 + b);
    let positions_q = positions_for_step(n, b);
    let mut spec = AttentionSpec::empty(q_len, n + q_len);
    for (q, &p) in positions_q.iter().enumerate() {
        spec.positions_q[q] = p;
        spec.positions_k[n + q] = p;
    }
    for k in 0..n {
        spec.positions_k[k] = k + 1;
    }
    for j in 1..=b {
        let row = j - 1;
        for k in 0..n {
            spec.set(row, k);
        }
        for c in 1..=j {
            spec.set(row, n + c - 1);
        }
    }
    for j in 1..=b {
        for i in 1..=b {
            let row = b + (j - 1) * b + (i - 1);
            for k in 0..n {
                spec.set(row, k);
            }
            for c in 1..=j {
                spec.set(row, n + c - 1);
            }
            for k in 1..=b {
                spec.set(row, n + b + (j - 1) * b + (k - 1));
            }
        }
    }
    Ok(spec)
}
