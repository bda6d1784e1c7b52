//! Byte-level corpus ingestion and the synthetic ascending-run grammar used
//! as the toy training corpus.
//!
//! Grammar documents look like `c5:cdefg.`: a start letter, a length digit,
//! a colon, then the ascending alphabet run of that length (wrapping z->a)
//! closed by a period. The continuation is a deterministic function of the
//! three-character prompt, so draft acceptance and exact-match accuracy are
//! both learnable by a tiny model in minutes on CPU.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Tokenize text as raw bytes.
pub fn bytes_to_tokens(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn tokens_to_string(tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .map(char::from)
        .collect()
}

/// Split a text corpus (one document per line) into fixed-length training
/// sequences of `s` tokens: BOS, then document bytes and EOS, PAD-filled.
/// Documents longer than `s - 1` payload tokens are chunked, each chunk
/// re-prefixed with BOS.
pub fn chunk_corpus(text: &str, s: usize, cfg: &ModelConfig) -> Result<Vec<Vec<u32>>> {
    let mut seqs = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let mut payload = bytes_to_tokens(line);
        payload.push(cfg.eos_token_id);
        for chunk in payload.chunks(s - 1) {
            let mut seq = Vec::with_capacity(s);
            seq.push(cfg.bos_token_id);
            seq.extend_from_slice(chunk);
            while seq.len() < s {
                seq.push(cfg.pad_token_id);
            }
            seqs.push(seq);
        }
    }
    if seqs.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    Ok(seqs)
}

/// Read a corpus file and chunk it to length-`s` sequences.
pub fn ingest_corpus(path: &Path, s: usize, cfg: &ModelConfig) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    chunk_corpus(&text, s, cfg)
}

fn run_char(start: u8, offset: usize) -> char {
    (b'a' + (start as usize + offset) as u8 % 26) as char
}

/// One grammar document for start letter index `start` (0..26) and run
/// length `len` (1..=9).
pub fn grammar_doc(start: u8, len: usize) -> String {
    assert!((1..=9).contains(&len));
    let mut doc = String::new();
    doc.push(run_char(start, 0));
    doc.push(char::from_digit(len as u32, 10).unwrap());
    doc.push(':');
    for i in 0..len {
        doc.push(run_char(start, i));
    }
    doc.push('.');
    doc
}

/// Prompt / expected-completion split of a grammar document.
pub fn grammar_task(start: u8, len: usize) -> (String, String) {
    let doc = grammar_doc(start, len);
    (doc[..3].to_string(), doc[3..].to_string())
}

/// Deterministic corpus of `n_docs` grammar documents, one per line.
pub fn grammar_corpus(n_docs: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(u8, usize)> = (0..26u8)
        .flat_map(|s| (4..=9).map(move |l| (s, l)))
        .collect();
    combos.shuffle(&mut rng);
    let mut out = String::new();
    for i in 0..n_docs {
        let (s, l) = combos[i % combos.len()];
        out.push_str(&grammar_doc(s, l));
        out.push('\n');
    }
    out
}

/// `n` prompt/expected pairs drawn deterministically from the grammar.
pub fn grammar_tasks(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(u8, usize)> = (0..26u8)
        .flat_map(|s| (4..=9).map(move |l| (s, l)))
        .collect();
    combos.shuffle(&mut rng);
    (0..n)
        .map(|i| {
            let (s, l) = combos[i % combos.len()];
            grammar_task(s, l)
        })
        .collect()
}
