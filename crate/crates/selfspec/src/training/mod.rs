//! Training: batch corruption, the dual AR + diffusion objective, and a
//! deterministic Adam loop with cosine LR decay.
//!
//! Each training sequence of length S becomes a `2S-1`-token forward: the S
//! clean tokens (causal, next-token labels shifted by one) followed by `S-1`
//! diffusion-section tokens covering positions `2..=S` (labels aligned with
//! their own positions). Under full masking the whole diffusion section is
//! mask tokens and every row bears loss; under random masking each position
//! is independently corrupted at a per-sequence rate and only corrupted
//! positions bear loss.
//!
//! The balanced objective is
//! `L = (alpha * mean(CE_AR) + mean(CE_Diff)) / (1 + alpha)`
//! with both means taken over the `S-1` valid (non-padded) terms.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{math, Backbone, LogitsBundle};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::maskgen::{build_training_spec, TrainingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    Full,
    Random,
}

/// Loss balancing factor alpha in [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One batch ready for the dual-mode forward.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub spec: TrainingSpec,
    /// Per sequence, the `2S-1` forwarded tokens.
    pub inputs: Vec<Vec<u32>>,
    /// Per sequence, label for clean row `p` (token at `p+1`), `None` = no loss.
    pub ar_labels: Vec<Vec<Option<u32>>>,
    /// Per sequence, label for the mask row covering position `p` (token at `p`).
    pub diff_labels: Vec<Vec<Option<u32>>>,
    pub masking_mode: MaskingMode,
}

fn check_seqs(seqs: &[Vec<u32>], cfg: &ModelConfig) -> Result<usize> {
    let s = seqs
        .first()
        .ok_or_else(|| Error::Batching("empty batch".into()))?
        .len();
    for seq in seqs {
        if seq.len() != s {
            return Err(Error::Batching("ragged batch".into()));
        }
        if seq[0] != cfg.bos_token_id {
            return Err(Error::Batching("sequences must begin with BOS".into()));
        }
    }
    Ok(s)
}

/// Number of leading non-PAD tokens; padding is always a suffix.
fn live_len(seq: &[u32], cfg: &ModelConfig) -> usize {
    seq.iter()
        .position(|&t| t == cfg.pad_token_id)
        .unwrap_or(seq.len())
}

fn labels_for(seq: &[u32], cfg: &ModelConfig) -> (Vec<Option<u32>>, Vec<Option<u32>>) {
    let s = seq.len();
    let live = live_len(seq, cfg);
    // AR labels are the inputs shifted by one; diffusion labels are unshifted.
    let ar: Vec<Option<u32>> = (1..s)
        .map(|p| if p + 1 <= live { Some(seq[p]) } else { None })
        .collect();
    let diff: Vec<Option<u32>> = (2..=s)
        .map(|p| if p <= live { Some(seq[p - 1]) } else { None })
        .collect();
    (ar, diff)
}

/// Full-mask corruption: the entire diffusion section becomes mask tokens and
/// every non-padded diffusion row bears loss.
pub fn make_batch_full(
    seqs: &[Vec<u32>],
    block_len: usize,
    cfg: &ModelConfig,
) -> Result<TrainingBatch> {
    let s = check_seqs(seqs, cfg)?;
    let spec = build_training_spec(s, block_len)?;
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut ar_labels = Vec::with_capacity(seqs.len());
    let mut diff_labels = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let live = live_len(seq, cfg);
        let mut input = seq.clone();
        for p in 2..=s {
            input.push(if p <= live {
                cfg.mask_token_id
            } else {
                cfg.pad_token_id
            });
        }
        let (ar, diff) = labels_for(seq, cfg);
        inputs.push(input);
        ar_labels.push(ar);
        diff_labels.push(diff);
    }
    Ok(TrainingBatch {
        spec,
        inputs,
        ar_labels,
        diff_labels,
        masking_mode: MaskingMode::Full,
    })
}

/// Random-mask ablation: each sequence draws a rate `u` from `rate_sampler`,
/// then every non-padded diffusion position is masked independently with
/// probability `u`. Unmasked positions carry the clean token and bear no
/// loss. A block that ends up with zero masked positions is re-sampled so
/// every live block contributes at least one loss term.
pub fn make_batch_random<R: Rng>(
    seqs: &[Vec<u32>],
    block_len: usize,
    cfg: &ModelConfig,
    rng: &mut R,
    rate_sampler: &mut dyn FnMut(&mut R) -> f64,
) -> Result<TrainingBatch> {
    let s = check_seqs(seqs, cfg)?;
    let spec = build_training_spec(s, block_len)?;
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut ar_labels = Vec::with_capacity(seqs.len());
    let mut diff_labels = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let live = live_len(seq, cfg);
        let u = rate_sampler(rng);
        debug_assert!(u > 0.0 && u <= 1.0);
        let mut input = seq.clone();
        input.extend(std::iter::repeat(0u32).take(s - 1));
        let (ar, mut diff) = labels_for(seq, cfg);
        let n_blocks = (s - 1) / block_len;
        for blk in 0..n_blocks {
            let block_positions: Vec<usize> = (0..block_len)
                .map(|i| 2 + blk * block_len + i)
                .collect();
            let live_positions: Vec<usize> = block_positions
                .iter()
                .copied()
                .filter(|&p| p <= live)
                .collect();
            let mut masked = vec![false; block_positions.len()];
            if !live_positions.is_empty() {
                loop {
                    let mut any = false;
                    for (idx, &p) in block_positions.iter().enumerate() {
                        if p <= live {
                            masked[idx] = rng.gen::<f64>() < u;
                            any |= masked[idx];
                        }
                    }
                    if any {
                        break;
                    }
                }
            }
            for (idx, &p) in block_positions.iter().enumerate() {
                let slot = s + (p - 2);
                if p > live {
                    input[slot] = cfg.pad_token_id;
                } else if masked[idx] {
                    input[slot] = cfg.mask_token_id;
                } else {
                    input[slot] = seq[p - 1];
                    diff[p - 2] = None;
                }
            }
        }
        inputs.push(input);
        ar_labels.push(ar);
        diff_labels.push(diff);
    }
    Ok(TrainingBatch {
        spec,
        inputs,
        ar_labels,
        diff_labels,
        masking_mode: MaskingMode::Random,
    })
}

/// Uniform (0, 1] masking-rate sampler.
pub fn uniform_rate<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// AR term, diffusion term, and the alpha-balanced total.
#[derive(Debug, Clone, Copy)]
pub struct DualLossReport {
    pub ar: f64,
    pub diff: f64,
    pub total: f64,
    pub ar_terms: usize,
    pub diff_terms: usize,
}

/// Cross-entropy means per section, balanced as
/// `(alpha * L_AR + L_Diff) / (1 + alpha)`. `bundles` holds one
/// `LogitsBundle` per batch sequence.
pub fn dual_loss(
    bundles: &[LogitsBundle],
    batch: &TrainingBatch,
    w: &LossWeights,
) -> Result<DualLossReport> {
    w.validate()?;
    if bundles.len() != batch.inputs.len() {
        return Err(Error::Batching("bundle count != batch size".into()));
    }
    let s = batch.spec.s;
    let mut ar_terms = 0usize;
    let mut diff_terms = 0usize;
    let mut seqs_counted = 0usize;
    let mut ar_mean_acc = 0.0f64;
    let mut diff_mean_acc = 0.0f64;
    for (si, bundle) in bundles.iter().enumerate() {
        if bundle.n_rows != 2 * s - 1 {
            return Err(Error::Batching("bundle row count != 2S-1".into()));
        }
        let mut ar_sum = 0.0f64;
        let mut n_ar = 0usize;
        for p in 1..s {
            if let Some(y) = batch.ar_labels[si][p - 1] {
                ar_sum -= math::log_softmax_at(bundle.row(batch.spec.clean_row(p)), y as usize);
                n_ar += 1;
            }
        }
        let mut diff_sum = 0.0f64;
        let mut n_diff = 0usize;
        for p in 2..=s {
            if let Some(y) = batch.diff_labels[si][p - 2] {
                diff_sum -= math::log_softmax_at(bundle.row(batch.spec.mask_row(p)), y as usize);
                n_diff += 1;
            }
        }
        if n_ar == 0 && n_diff == 0 {
            continue;
        }
        seqs_counted += 1;
        if n_ar > 0 {
            ar_mean_acc += ar_sum / n_ar as f64;
        }
        if n_diff > 0 {
            diff_mean_acc += diff_sum / n_diff as f64;
        }
        ar_terms += n_ar;
        diff_terms += n_diff;
    }
    if seqs_counted == 0 {
        return Err(Error::NoValidTerms);
    }
    let ar = ar_mean_acc / seqs_counted as f64;
    let diff = diff_mean_acc / seqs_counted as f64;
    let total = (w.alpha * ar + diff) / (1.0 + w.alpha);
    Ok(DualLossReport {
        ar,
        diff,
        total,
        ar_terms,
        diff_terms,
    })
}

/// Everything the training loop needs beyond the model config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training sequence length S; `S - 1` must be a multiple of `block_len`.
    pub seq_len: usize,
    pub block_len: usize,
    pub peak_lr: f32,
    pub min_lr: f32,
    /// Fraction of steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps_adam: f32,
    pub alpha: f64,
    pub masking: MaskingMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 800,
            batch_size: 16,
            seq_len: 17,
            block_len: 4,
            peak_lr: 3e-3,
            min_lr: 3e-4,
            warmup_frac: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps_adam: 1e-8,
            alpha: 1.0,
            masking: MaskingMode::Full,
            seed: 0,
        }
    }
}

/// One row of the per-step training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub lr: f32,
    pub l_ar: f64,
    pub l_diff: f64,
    pub l_total: f64,
}

/// Linear warmup into cosine decay from `peak_lr` down to `min_lr`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f32 {
    let warmup = ((cfg.steps as f64 * cfg.warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        return cfg.peak_lr * (step + 1) as f32 / warmup as f32;
    }
    let span = (cfg.steps.saturating_sub(warmup)).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * cos as f32
}

/// Deterministic Adam training loop. Returns the trained backbone; per-step
/// loss rows are appended to `log` when provided.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seqs: &[Vec<u32>],
    mut log: Option<&mut Vec<TrainLogRow>>,
) -> Result<Backbone> {
    model_cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Corpus("no training sequences".into()));
    }
    if train_cfg.seq_len < 2 || (train_cfg.seq_len - 1) % train_cfg.block_len != 0 {
        return Err(Error::Batching(
            "seq_len - 1 must be a positive multiple of block_len".into(),
        ));
    }
    if train_cfg.seq_len > model_cfg.max_seq_len {
        return Err(Error::Capacity("seq_len exceeds max_seq_len".into()));
    }
    for seq in seqs {
        if seq.len() != train_cfg.seq_len {
            return Err(Error::Batching("corpus sequence length != seq_len".into()));
        }
    }
    let w = LossWeights {
        alpha: train_cfg.alpha,
    };
    w.validate()?;

    let mut backbone = Backbone::init(model_cfg.clone())?;
    let n_params = backbone.layout().n_params;
    let mut m = vec![0.0f32; n_params];
    let mut v = vec![0.0f32; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);

    for step in 0..train_cfg.steps {
        let picks: Vec<Vec<u32>> = (0..train_cfg.batch_size)
            .map(|_| seqs[rng.gen_range(0..seqs.len())].clone())
            .collect();
        let batch = match train_cfg.masking {
            MaskingMode::Full => make_batch_full(&picks, train_cfg.block_len, model_cfg)?,
            MaskingMode::Random => {
                make_batch_random(&picks, train_cfg.block_len, model_cfg, &mut rng, &mut uniform_rate)?
            }
        };
        let (report, grad) = autodiff::batch_loss_and_grad(&backbone, &batch, &w)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = lr_at(step, train_cfg);
        let t = (step + 1) as f32;
        let bc1 = 1.0 - train_cfg.beta1.powf(t);
        let bc2 = 1.0 - train_cfg.beta2.powf(t);
        let params = backbone.params_mut();
        for i in 0..n_params {
            let g = grad[i];
            m[i] = train_cfg.beta1 * m[i] + (1.0 - train_cfg.beta1) * g;
            v[i] = train_cfg.beta2 * v[i] + (1.0 - train_cfg.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + train_cfg.eps_adam);
        }
        if let Some(log) = log.as_deref_mut() {
            log.push(TrainLogRow {
                step,
                lr,
                l_ar: report.ar,
                l_diff: report.diff,
                l_total: report.total,
            });
        }
    }
    Ok(backbone)
}
