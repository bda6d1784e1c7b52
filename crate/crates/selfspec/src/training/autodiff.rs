//! Manual reverse-mode differentiation of the dual training objective.
//!
//! The tape forward mirrors `Backbone::forward` op-for-op (no cache in the
//! training layout) and records the activations needed by the hand-written
//! backward pass. Gradients are accumulated into a flat vector matching the
//! parameter layout, which keeps the Adam update and finite-difference
//! probes trivial.

use rayon::prelude::*;

use crate::backbone::math;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::training::{DualLossReport, LossWeights, TrainingBatch};

struct LayerTape {
    x_in: Vec<f32>,
    ri1: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Per head, row-major `[n x n]` attention probabilities (zero where
    /// disallowed).
    probs: Vec<Vec<f32>>,
    attn: Vec<f32>,
    x_mid: Vec<f32>,
    ri2: Vec<f32>,
    h2: Vec<f32>,
    z1: Vec<f32>,
    a1: Vec<f32>,
}

struct Tape {
    layers: Vec<LayerTape>,
    x_out: Vec<f32>,
    ri_f: Vec<f32>,
    h_f: Vec<f32>,
    logits: Vec<f32>,
}

/// `gw[o][i] += dy[o] * x[i]` for row-major `gw: [out x in]`.
fn outer_acc(gw: &mut [f32], dy: &[f32], x: &[f32]) {
    let in_dim = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut gw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            row[i] += g * x[i];
        }
    }
}

/// `dx[i] += sum_o w[o][i] * dy[o]`.
fn matvec_t_acc(w: &[f32], dy: &[f32], in_dim: usize, dx: &mut [f32]) {
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            dx[i] += g * row[i];
        }
    }
}

/// Backward through `y = g * x * ri`; adds into `dg` and `dx`.
fn rms_backward(dy: &[f32], x: &[f32], ri: f32, g: &[f32], dg: &mut [f32], dx: &mut [f32]) {
    let n = x.len() as f32;
    let mut dot = 0.0f32;
    for t in 0..x.len() {
        dg[t] += dy[t] * x[t] * ri;
        dot += g[t] * dy[t] * x[t];
    }
    let c = ri * ri * ri / n * dot;
    for t in 0..x.len() {
        dx[t] += ri * g[t] * dy[t] - c * x[t];
    }
}

fn tape_forward(bb: &Backbone, tokens: &[u32], spec: &crate::maskgen::AttentionSpec) -> Tape {
    let cfg = bb.config();
    let layout = bb.layout();
    let p = bb.params();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let hidden = cfg.ffn_hidden();
    let n = tokens.len();
    let scale = 1.0 / (hd as f32).sqrt();

    let mut x = vec![0.0f32; n * d];
    let emb = &p[layout.tok_emb.clone()];
    for (i, &t) in tokens.iter().enumerate() {
        x[i * d..(i + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut h_buf = vec![0.0f32; d];
    for lo in &layout.layers {
        let x_in = x.clone();
        let g1 = &p[lo.ln1.clone()];
        let mut ri1 = vec![0.0f32; n];
        let mut h1 = vec![0.0f32; n * d];
        let mut q = vec![0.0f32; n * d];
        let mut k = vec![0.0f32; n * d];
        let mut v = vec![0.0f32; n * d];
        for i in 0..n {
            h_buf.copy_from_slice(&x[i * d..(i + 1) * d]);
            ri1[i] = math::rmsnorm(&mut h_buf, g1);
            h1[i * d..(i + 1) * d].copy_from_slice(&h_buf);
            math::matvec(&p[lo.wq.clone()], &h_buf, d, d, &mut q[i * d..(i + 1) * d]);
            math::matvec(&p[lo.wk.clone()], &h_buf, d, d, &mut k[i * d..(i + 1) * d]);
            math::matvec(&p[lo.wv.clone()], &h_buf, d, d, &mut v[i * d..(i + 1) * d]);
            math::rotate(&mut q[i * d..(i + 1) * d], spec.positions_q[i], nh, hd);
            math::rotate(&mut k[i * d..(i + 1) * d], spec.positions_q[i], nh, hd);
        }
        let mut probs = vec![vec![0.0f32; n * n]; nh];
        let mut attn = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n];
        for i in 0..n {
            for h in 0..nh {
                let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
                let mut max = f32::NEG_INFINITY;
                for j in 0..n {
                    if !spec.is_allowed(i, j) {
                        continue;
                    }
                    let kh = &k[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut s = 0.0f32;
                    for t in 0..hd {
                        s += qh[t] * kh[t];
                    }
                    let s = s * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = 0.0f32;
                for j in 0..n {
                    if spec.is_allowed(i, j) {
                        let e = (scores[j] - max).exp();
                        scores[j] = e;
                        denom += e;
                    }
                }
                let out = &mut attn[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..n {
                    if !spec.is_allowed(i, j) {
                        continue;
                    }
                    let w = scores[j] / denom;
                    probs[h][i * n + j] = w;
                    let vh = &v[j * d + h * hd..j * d + (h + 1) * hd];
                    for t in 0..hd {
                        out[t] += w * vh[t];
                    }
                }
            }
        }
        let g2 = &p[lo.ln2.clone()];
        let mut ri2 = vec![0.0f32; n];
        let mut h2 = vec![0.0f32; n * d];
        let mut z1 = vec![0.0f32; n * hidden];
        let mut a1 = vec![0.0f32; n * hidden];
        let mut x_mid = vec![0.0f32; n * d];
        let mut mlp_out = vec![0.0f32; d];
        for i in 0..n {
            math::matvec(&p[lo.wo.clone()], &attn[i * d..(i + 1) * d], d, d, &mut h_buf);
            for t in 0..d {
                x[i * d + t] += h_buf[t];
            }
            x_mid[i * d..(i + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
            h_buf.copy_from_slice(&x[i * d..(i + 1) * d]);
            ri2[i] = math::rmsnorm(&mut h_buf, g2);
            h2[i * d..(i + 1) * d].copy_from_slice(&h_buf);
            math::matvec(
                &p[lo.fc1.clone()],
                &h_buf,
                hidden,
                d,
                &mut z1[i * hidden..(i + 1) * hidden],
            );
            for t in 0..hidden {
                a1[i * hidden + t] = math::silu(z1[i * hidden + t]);
            }
            math::matvec(
                &p[lo.fc2.clone()],
                &a1[i * hidden..(i + 1) * hidden],
                d,
                hidden,
                &mut mlp_out,
            );
            for t in 0..d {
                x[i * d + t] += mlp_out[t];
            }
        }
        layers.push(LayerTape {
            x_in,
            ri1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            ri2,
            h2,
            z1,
            a1,
        });
    }

    let x_out = x.clone();
    let g_f = &p[layout.ln_f.clone()];
    let w_head = &p[layout.lm_head.clone()];
    let mut ri_f = vec![0.0f32; n];
    let mut h_f = vec![0.0f32; n * d];
    let mut logits = vec![0.0f32; n * cfg.vocab_size];
    for i in 0..n {
        h_buf.copy_from_slice(&x[i * d..(i + 1) * d]);
        ri_f[i] = math::rmsnorm(&mut h_buf, g_f);
        h_f[i * d..(i + 1) * d].copy_from_slice(&h_buf);
        math::matvec(
            w_head,
            &h_buf,
            cfg.vocab_size,
            d,
            &mut logits[i * cfg.vocab_size..(i + 1) * cfg.vocab_size],
        );
    }
    Tape {
        layers,
        x_out,
        ri_f,
        h_f,
        logits,
    }
}

struct SeqOut {
    ar_mean: f64,
    diff_mean: f64,
    grad: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
fn seq_loss_and_grad(
    bb: &Backbone,
    tokens: &[u32],
    batch: &TrainingBatch,
    seq_idx: usize,
    alpha: f64,
    n_counted: usize,
) -> SeqOut {
    let cfg = bb.config();
    let layout = bb.layout();
    let p = bb.params();
    let spec = &batch.spec.spec;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let hidden = cfg.ffn_hidden();
    let vocab = cfg.vocab_size;
    let n = tokens.len();
    let s = batch.spec.s;
    let scale = 1.0 / (hd as f32).sqrt();

    let tape = tape_forward(bb, tokens, spec);

    // Loss terms and dL/dlogits.
    let n_ar = batch.ar_labels[seq_idx].iter().flatten().count();
    let n_diff = batch.diff_labels[seq_idx].iter().flatten().count();
    let mut targets: Vec<Option<(u32, f32)>> = vec![None; n];
    let mut ar_sum = 0.0f64;
    let mut diff_sum = 0.0f64;
    for pos in 1..s {
        if let Some(y) = batch.ar_labels[seq_idx][pos - 1] {
            let row = batch.spec.clean_row(pos);
            ar_sum -= math::log_softmax_at(&tape.logits[row * vocab..(row + 1) * vocab], y as usize);
            let coeff = (alpha / ((1.0 + alpha) * n_ar as f64 * n_counted as f64)) as f32;
            targets[row] = Some((y, coeff));
        }
    }
    for pos in 2..=s {
        if let Some(y) = batch.diff_labels[seq_idx][pos - 2] {
            let row = batch.spec.mask_row(pos);
            diff_sum -=
                math::log_softmax_at(&tape.logits[row * vocab..(row + 1) * vocab], y as usize);
            let coeff = (1.0 / ((1.0 + alpha) * n_diff as f64 * n_counted as f64)) as f32;
            targets[row] = Some((y, coeff));
        }
    }

    let mut grad = vec![0.0f32; layout.n_params];
    let mut dlogits = vec![0.0f32; n * vocab];
    for (row, target) in targets.iter().enumerate() {
        let Some((y, coeff)) = target else { continue };
        let logits_row = &tape.logits[row * vocab..(row + 1) * vocab];
        let max = logits_row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = logits_row.iter().map(|&v| ((v as f64) - max).exp()).sum();
        let drow = &mut dlogits[row * vocab..(row + 1) * vocab];
        for o in 0..vocab {
            let prob = (((logits_row[o] as f64) - max).exp() / denom) as f32;
            drow[o] = coeff * prob;
        }
        drow[*y as usize] -= coeff;
    }

    // lm_head and final norm.
    let mut dx = vec![0.0f32; n * d];
    {
        let w_head = &p[layout.lm_head.clone()];
        let g_f = &p[layout.ln_f.clone()];
        let mut dh_f = vec![0.0f32; d];
        for row in 0..n {
            if targets[row].is_none() {
                continue;
            }
            let drow = &dlogits[row * vocab..(row + 1) * vocab];
            dh_f.fill(0.0);
            outer_acc(
                &mut grad[layout.lm_head.clone()],
                drow,
                &tape.h_f[row * d..(row + 1) * d],
            );
            matvec_t_acc(w_head, drow, d, &mut dh_f);
            let (dg_f, dx_row) = (
                layout.ln_f.clone(),
                &mut dx[row * d..(row + 1) * d],
            );
            rms_backward(
                &dh_f,
                &tape.x_out[row * d..(row + 1) * d],
                tape.ri_f[row],
                g_f,
                &mut grad[dg_f],
                dx_row,
            );
        }
    }

    // Layers in reverse.
    for (l, lo) in layout.layers.iter().enumerate().rev() {
        let t = &tape.layers[l];
        let g1 = &p[lo.ln1.clone()];
        let g2 = &p[lo.ln2.clone()];
        let mut dx_mid = vec![0.0f32; n * d];
        // MLP + second residual.
        {
            let mut da1 = vec![0.0f32; hidden];
            let mut dz1 = vec![0.0f32; hidden];
            let mut dh2 = vec![0.0f32; d];
            for i in 0..n {
                let dxo = &dx[i * d..(i + 1) * d];
                da1.fill(0.0);
                outer_acc(
                    &mut grad[lo.fc2.clone()],
                    dxo,
                    &t.a1[i * hidden..(i + 1) * hidden],
                );
                matvec_t_acc(&p[lo.fc2.clone()], dxo, hidden, &mut da1);
                for h in 0..hidden {
                    dz1[h] = da1[h] * math::silu_grad(t.z1[i * hidden + h]);
                }
                dh2.fill(0.0);
                outer_acc(&mut grad[lo.fc1.clone()], &dz1, &t.h2[i * d..(i + 1) * d]);
                matvec_t_acc(&p[lo.fc1.clone()], &dz1, d, &mut dh2);
                let dm = &mut dx_mid[i * d..(i + 1) * d];
                for k in 0..d {
                    dm[k] += dxo[k];
                }
                rms_backward(
                    &dh2,
                    &t.x_mid[i * d..(i + 1) * d],
                    t.ri2[i],
                    g2,
                    &mut grad[lo.ln2.clone()],
                    dm,
                );
            }
        }
        // Attention + first residual.
        let mut dattn = vec![0.0f32; n * d];
        for i in 0..n {
            let dm = &dx_mid[i * d..(i + 1) * d];
            outer_acc(&mut grad[lo.wo.clone()], dm, &t.attn[i * d..(i + 1) * d]);
            matvec_t_acc(&p[lo.wo.clone()], dm, d, &mut dattn[i * d..(i + 1) * d]);
        }
        let mut dq = vec![0.0f32; n * d];
        let mut dk = vec![0.0f32; n * d];
        let mut dv = vec![0.0f32; n * d];
        let mut da = vec![0.0f32; n];
        for h in 0..nh {
            let pr_all = &t.probs[h];
            for i in 0..n {
                let dout = &dattn[i * d + h * hd..i * d + (h + 1) * hd];
                let pr = &pr_all[i * n..(i + 1) * n];
                let mut sum_term = 0.0f32;
                for j in 0..n {
                    if pr[j] == 0.0 {
                        da[j] = 0.0;
                        continue;
                    }
                    let vh = &t.v[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut acc = 0.0f32;
                    for c in 0..hd {
                        acc += dout[c] * vh[c];
                    }
                    da[j] = acc;
                    sum_term += pr[j] * acc;
                }
                let qh = &t.q[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..n {
                    if pr[j] == 0.0 {
                        continue;
                    }
                    let ds = pr[j] * (da[j] - sum_term) * scale;
                    let kh = &t.k[j * d + h * hd..j * d + (h + 1) * hd];
                    let dq_i = &mut dq[i * d + h * hd..i * d + (h + 1) * hd];
                    for c in 0..hd {
                        dq_i[c] += ds * kh[c];
                    }
                    let dk_j = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                    for c in 0..hd {
                        dk_j[c] += ds * qh[c];
                    }
                    let dv_j = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                    let w = pr[j];
                    for c in 0..hd {
                        dv_j[c] += w * dout[c];
                    }
                }
            }
        }
        // Undo rotary, then project back through Q/K/V and the first norm.
        let mut dx_in = dx_mid;
        let mut dh1 = vec![0.0f32; d];
        for i in 0..n {
            math::rotate_inverse(&mut dq[i * d..(i + 1) * d], spec.positions_q[i], nh, hd);
            math::rotate_inverse(&mut dk[i * d..(i + 1) * d], spec.positions_q[i], nh, hd);
            let h1 = &t.h1[i * d..(i + 1) * d];
            dh1.fill(0.0);
            outer_acc(&mut grad[lo.wq.clone()], &dq[i * d..(i + 1) * d], h1);
            matvec_t_acc(&p[lo.wq.clone()], &dq[i * d..(i + 1) * d], d, &mut dh1);
            outer_acc(&mut grad[lo.wk.clone()], &dk[i * d..(i + 1) * d], h1);
            matvec_t_acc(&p[lo.wk.clone()], &dk[i * d..(i + 1) * d], d, &mut dh1);
            outer_acc(&mut grad[lo.wv.clone()], &dv[i * d..(i + 1) * d], h1);
            matvec_t_acc(&p[lo.wv.clone()], &dv[i * d..(i + 1) * d], d, &mut dh1);
            rms_backward(
                &dh1,
                &t.x_in[i * d..(i + 1) * d],
                t.ri1[i],
                g1,
                &mut grad[lo.ln1.clone()],
                &mut dx_in[i * d..(i + 1) * d],
            );
        }
        dx = dx_in;
    }

    // Embedding.
    {
        let g_emb = &mut grad[layout.tok_emb.clone()];
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &mut g_emb[tok as usize * d..(tok as usize + 1) * d];
            for c in 0..d {
                row[c] += dx[i * d + c];
            }
        }
    }

    SeqOut {
        ar_mean: if n_ar > 0 { ar_sum / n_ar as f64 } else { 0.0 },
        diff_mean: if n_diff > 0 { diff_sum / n_diff as f64 } else { 0.0 },
        grad,
    }
}

/// Dual loss plus the gradient of the batch-mean loss over all parameters.
pub fn batch_loss_and_grad(
    bb: &Backbone,
    batch: &TrainingBatch,
    w: &LossWeights,
) -> Result<(DualLossReport, Vec<f32>)> {
    w.validate()?;
    let counted: Vec<usize> = (0..batch.inputs.len())
        .filter(|&i| {
            batch.ar_labels[i].iter().any(Option::is_some)
                || batch.diff_labels[i].iter().any(Option::is_some)
        })
        .collect();
    if counted.is_empty() {
        return Err(Error::NoValidTerms);
    }
    let n_counted = counted.len();
    let outs: Vec<SeqOut> = counted
        .par_iter()
        .map(|&i| seq_loss_and_grad(bb, &batch.inputs[i], batch, i, w.alpha, n_counted))
        .collect();
    let mut grad = vec![0.0f32; bb.layout().n_params];
    let mut ar = 0.0f64;
    let mut diff = 0.0f64;
    let mut ar_terms = 0usize;
    let mut diff_terms = 0usize;
    for (idx, out) in counted.iter().zip(&outs) {
        ar += out.ar_mean;
        diff += out.diff_mean;
        ar_terms += batch.ar_labels[*idx].iter().flatten().count();
        diff_terms += batch.diff_labels[*idx].iter().flatten().count();
        for (g, o) in grad.iter_mut().zip(&out.grad) {
            *g += o;
        }
    }
    let ar = ar / n_counted as f64;
    let diff = diff / n_counted as f64;
    let total = (w.alpha * ar + diff) / (1.0 + w.alpha);
    Ok((
        DualLossReport {
            ar,
            diff,
            total,
            ar_terms,
            diff_terms,
        },
        grad,
    ))
}
