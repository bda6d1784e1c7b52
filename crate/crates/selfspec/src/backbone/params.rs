//! Flat parameter storage with a computed offset layout.
//!
//! All weights live in one `Vec<f32>` so the optimizer, checkpointing, and
//! finite-difference probes can treat the model as a single flat vector.

use std::ops::Range;

use crate::config::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2: Range<usize>,
    pub fc1: Range<usize>,
    pub fc2: Range<usize>,
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: Range<usize>,
    pub layers: Vec<LayerOffsets>,
    pub ln_f: Range<usize>,
    pub lm_head: Range<usize>,
    pub n_params: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let v = cfg.vocab_size;
        let mut off = 0usize;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let tok_emb = take(v * d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerOffsets {
                ln1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2: take(d),
                fc1: take(h * d),
                fc2: take(d * h),
            });
        }
        let ln_f = take(d);
        let lm_head = take(v * d);
        ParamLayout {
            tok_emb,
            layers,
            ln_f,
            lm_head,
            n_params: off,
        }
    }

    /// Named tensors with shapes, in storage order; drives the checkpoint format.
    pub fn tensors(&self, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Range<usize>)> {
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let v = cfg.vocab_size;
        let mut out = vec![("tok_emb".to_string(), vec![v, d], self.tok_emb.clone())];
        for (l, lo) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1"), vec![d], lo.ln1.clone()));
            out.push((format!("layer{l}.wq"), vec![d, d], lo.wq.clone()));
            out.push((format!("layer{l}.wk"), vec![d, d], lo.wk.clone()));
            out.push((format!("layer{l}.wv"), vec![d, d], lo.wv.clone()));
            out.push((format!("layer{l}.wo"), vec![d, d], lo.wo.clone()));
            out.push((format!("layer{l}.ln2"), vec![d], lo.ln2.clone()));
            out.push((format!("layer{l}.fc1"), vec![h, d], lo.fc1.clone()));
            out.push((format!("layer{l}.fc2"), vec![d, h], lo.fc2.clone()));
        }
        out.push(("ln_f".to_string(), vec![d], self.ln_f.clone()));
        out.push(("lm_head".to_string(), vec![v, d], self.lm_head.clone()));
        out
    }
}
