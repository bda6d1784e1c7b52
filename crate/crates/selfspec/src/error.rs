use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or run configuration; the message names the violated invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A position index or sequence length exceeds model capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A malformed attention spec (shape mismatch, all-false row, ...).
    #[error("attention spec error: {0}")]
    Spec(String),

    /// KV rows do not line up with the cache (position gap, wrong order).
    #[error("cache consistency error: {0}")]
    CacheConsistency(String),

    /// Out-of-range argument (e.g. evicting to a length beyond cache_len).
    #[error("range error: {0}")]
    Range(String),

    /// Batching contract violated (e.g. S-1 not divisible by the block length).
    #[error("batching contract error: {0}")]
    Batching(String),

    /// A loss was requested over zero valid terms.
    #[error("no valid loss terms")]
    NoValidTerms,

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    /// Corpus could not be ingested.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Checkpoint file is corrupt or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
