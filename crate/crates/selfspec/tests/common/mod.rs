//! Shared test support: an independent f64 reference implementation of the
//! backbone (written against the parameter layout, not the production
//! forward), reference loss computation, and lazily trained model fixtures.

#![allow(dead_code)]

use std::sync::OnceLock;

use selfspec::maskgen::AttentionSpec;
use selfspec::training::{
    corpus::{chunk_corpus, grammar_corpus},
    train, MaskingMode, TrainConfig, TrainingBatch,
};
use selfspec::{Backbone, ModelConfig};

/// f64 re-implementation of the forward pass, no cache, built on nested
/// vectors instead of flat buffers. Serves as the ground-truth oracle for
/// logits and for finite-difference loss probes.
pub struct RefModel {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
}

impl RefModel {
    pub fn from_backbone(bb: &Backbone) -> Self {
        RefModel {
            cfg: bb.config().clone(),
            params: bb.params().iter().map(|&p| p as f64).collect(),
        }
    }

    fn layout(&self) -> selfspec::backbone::params::ParamLayout {
        selfspec::backbone::params::ParamLayout::new(&self.cfg)
    }

    /// Logit rows for `tokens` under `spec`. The spec must be cache-free:
    /// keys are exactly the forwarded tokens.
    pub fn forward(&self, tokens: &[u32], spec: &AttentionSpec) -> Vec<Vec<f64>> {
        assert_eq!(spec.n_query, tokens.len());
        assert_eq!(
            spec.n_key, spec.n_query,
            "reference forward does not support caches"
        );
        assert_eq!(spec.positions_q, spec.positions_k);
        let cfg = &self.cfg;
        let layout = self.layout();
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        let hidden = cfg.ffn_hidden();
        let n = tokens.len();

        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| {
                let base = layout.tok_emb.start + t as usize * d;
                self.params[base..base + d].to_vec()
            })
            .collect();

        for lo in &layout.layers {
            let hq: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let h = rms(&x[i], &self.params[lo.ln1.clone()]);
                    let mut q = matvec(&self.params[lo.wq.clone()], &h, d, d);
                    rope(&mut q, spec.positions_q[i], nh, hd);
                    q
                })
                .collect();
            let hk: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let h = rms(&x[i], &self.params[lo.ln1.clone()]);
                    let mut k = matvec(&self.params[lo.wk.clone()], &h, d, d);
                    rope(&mut k, spec.positions_q[i], nh, hd);
                    k
                })
                .collect();
            let hv: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let h = rms(&x[i], &self.params[lo.ln1.clone()]);
                    matvec(&self.params[lo.wv.clone()], &h, d, d)
                })
                .collect();
            for i in 0..n {
                let mut merged = vec![0.0f64; d];
                for h in 0..nh {
                    let q = &hq[i][h * hd..(h + 1) * hd];
                    let keys: Vec<usize> =
                        (0..n).filter(|&k| spec.is_allowed(i, k)).collect();
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|&k| {
                            let kh = &hk[k][h * hd..(h + 1) * hd];
                            q.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (w, &k) in exps.iter().zip(&keys) {
                        let vh = &hv[k][h * hd..(h + 1) * hd];
                        for t in 0..hd {
                            merged[h * hd + t] += w / z * vh[t];
                        }
                    }
                }
                let o = matvec(&self.params[lo.wo.clone()], &merged, d, d);
                for t in 0..d {
                    x[i][t] += o[t];
                }
                let h2 = rms(&x[i], &self.params[lo.ln2.clone()]);
                let z1 = matvec(&self.params[lo.fc1.clone()], &h2, hidden, d);
                let a1: Vec<f64> = z1.iter().map(|&z| z / (1.0 + (-z).exp())).collect();
                let mlp = matvec(&self.params[lo.fc2.clone()], &a1, d, hidden);
                for t in 0..d {
                    x[i][t] += mlp[t];
                }
            }
        }

        (0..n)
            .map(|i| {
                let h = rms(&x[i], &self.params[layout.ln_f.clone()]);
                matvec(
                    &self.params[layout.lm_head.clone()],
                    &h,
                    cfg.vocab_size,
                    d,
                )
            })
            .collect()
    }

    /// The balanced dual objective over a batch, recomputed from scratch
    /// against the reference forward.
    pub fn dual_loss(&self, batch: &TrainingBatch, alpha: f64) -> f64 {
        let s = batch.spec.s;
        let mut counted = 0usize;
        let mut ar_acc = 0.0;
        let mut diff_acc = 0.0;
        for (si, input) in batch.inputs.iter().enumerate() {
            let logits = self.forward(input, &batch.spec.spec);
            let mut ar = (0.0, 0usize);
            for p in 1..s {
                if let Some(y) = batch.ar_labels[si][p - 1] {
                    ar.0 -= log_softmax(&logits[batch.spec.clean_row(p)], y as usize);
                    ar.1 += 1;
                }
            }
            let mut diff = (0.0, 0usize);
            for p in 2..=s {
                if let Some(y) = batch.diff_labels[si][p - 2] {
                    diff.0 -= log_softmax(&logits[batch.spec.mask_row(p)], y as usize);
                    diff.1 += 1;
                }
            }
            if ar.1 == 0 && diff.1 == 0 {
                continue;
            }
            counted += 1;
            if ar.1 > 0 {
                ar_acc += ar.0 / ar.1 as f64;
            }
            if diff.1 > 0 {
                diff_acc += diff.0 / diff.1 as f64;
            }
        }
        assert!(counted > 0);
        (alpha * ar_acc / counted as f64 + diff_acc / counted as f64) / (1.0 + alpha)
    }
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let ri = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(xi, gi)| xi * ri * gi).collect()
}

fn matvec(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    (0..out_dim)
        .map(|o| {
            w[o * in_dim..(o + 1) * in_dim]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn rope(row: &mut [f64], pos: usize, n_heads: usize, head_dim: usize) {
    for h in 0..n_heads {
        for i in 0..head_dim / 2 {
            let theta =
                pos as f64 * 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let a = row[h * head_dim + 2 * i];
            let b = row[h * head_dim + 2 * i + 1];
            row[h * head_dim + 2 * i] = a * cos - b * sin;
            row[h * head_dim + 2 * i + 1] = a * sin + b * cos;
        }
    }
}

pub fn log_softmax(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    row[target] - m - z.ln()
}

/// Fully causal spec over `n` fresh tokens (oracle construction for tests).
pub fn causal_spec(n: usize) -> AttentionSpec {
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..=q {
            allowed[q * n + k] = true;
        }
    }
    let positions: Vec<usize> = (1..=n).collect();
    AttentionSpec {
        n_query: n,
        n_key: n,
        allowed,
        positions_q: positions.clone(),
        positions_k: positions,
    }
}

/// Model/training shape shared by the trained fixtures.
pub fn fixture_model_config(seed: u64) -> ModelConfig {
    ModelConfig::byte_level(64, 2, 4, seed)
}

/// Main fixture budget: long enough that the diffusion head denoises
/// grid-aligned blocks reliably, which the decoder-comparison properties
/// exercise.
pub fn fixture_train_config(masking: MaskingMode) -> TrainConfig {
    TrainConfig {
        steps: 400,
        masking,
        ..TrainConfig::default()
    }
}

/// Ablation budget, frozen before saturation: at ~200 steps both masking
/// modes hit 100% task accuracy but still differ measurably in draft
/// acceptance; at longer budgets the toy task saturates and the gap
/// between the modes closes.
pub fn ablation_train_config(masking: MaskingMode) -> TrainConfig {
    TrainConfig {
        steps: 200,
        masking,
        ..TrainConfig::default()
    }
}

fn train_fixture(cfg: TrainConfig) -> Backbone {
    let model_cfg = fixture_model_config(1);
    let corpus = grammar_corpus(240, 7);
    let seqs = chunk_corpus(&corpus, cfg.seq_len, &model_cfg).unwrap();
    train(&model_cfg, &cfg, &seqs, None).unwrap()
}

/// Grammar-trained model, full masking. Trained once per test binary.
pub fn trained_model() -> &'static Backbone {
    static MODEL: OnceLock<Backbone> = OnceLock::new();
    MODEL.get_or_init(|| train_fixture(fixture_train_config(MaskingMode::Full)))
}

/// Full masking at the shorter ablation budget.
pub fn trained_ablation_model() -> &'static Backbone {
    static MODEL: OnceLock<Backbone> = OnceLock::new();
    MODEL.get_or_init(|| train_fixture(ablation_train_config(MaskingMode::Full)))
}

/// Same budget and data as the ablation model, random masking.
pub fn trained_random_model() -> &'static Backbone {
    static MODEL: OnceLock<Backbone> = OnceLock::new();
    MODEL.get_or_init(|| train_fixture(ablation_train_config(MaskingMode::Random)))
}

/// Small random-initialized model; equivalence properties hold at any
/// weights, so most engine tests use this instead of a trained model.
pub fn random_backbone(seed: u64) -> Backbone {
    Backbone::init(ModelConfig::byte_level(32, 2, 2, seed)).unwrap()
}

/// Held-out prompts: BOS + the 3-byte grammar prompt.
pub fn grammar_prompts(n: usize, seed: u64) -> Vec<Vec<u32>> {
    selfspec::training::corpus::grammar_tasks(n, seed)
        .into_iter()
        .map(|(p, _)| {
            let mut toks = vec![256u32];
            toks.extend(p.bytes().map(u32::from));
            toks
        })
        .collect()
}
