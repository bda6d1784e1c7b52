//! Hybrid language-model decoding at desk scale: draft tokens in parallel
//! via one-step masked diffusion, commit tokens via autoregressive greedy
//! verification, all inside a single model forward per decoding step.
//!
//! The crate is organized around the moving parts of that loop:
//!
//! - [`backbone`]: a mask-programmable transformer with explicit positions,
//!   explicit attention specs, and an exact KV cache with suffix eviction.
//! - [`maskgen`]: construction and slicing of the training, prefill, and
//!   decode attention masks.
//! - [`training`]: dual AR + diffusion objective, batch corruption (full or
//!   random masking), a deterministic training loop, and checkpointing.
//! - [`engine`]: the draft-and-verify decoding state machine plus pure-AR
//!   and block-diffusion baseline decoders.
//! - [`eval`]: AR-mode likelihood scoring and synthetic-task accuracy.
//! - [`bench`]: forward-latency profiling over prefix lengths and token slots.

pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod maskgen;
pub mod training;

pub use backbone::{Backbone, LogitsBundle};
pub use config::ModelConfig;
pub use error::{Error, Result};
