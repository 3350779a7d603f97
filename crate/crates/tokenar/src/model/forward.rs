//! Teacher-forced forward pass over a full sequence bundle.
//!
//! Pre-norm residual blocks: x += Wo·attn(LN1 x); x += W2·gelu(W1·LN2 x).
//! Rotary embedding is applied to q/k inside attention, index embeddings are
//! added to the input embeddings, and instruct positions bypass the token
//! embedding entirely in favor of the learnable instruct vectors.

use crate::error::{Result, TokenArError};
use crate::mat::{dot, matmul, softmax_inplace, Mat};
use crate::scalar::Real;
use crate::sequence::SequenceBundle;

use super::trace::{AttentionTrace, TraceSpec};
use super::{gelu, rope_angles, rope_forward, ModelParams, LAYERNORM_EPS};

pub struct ForwardOutput<T> {
    /// One row per predicted position: row j carries the distribution for
    /// `target_ids[j]`, taken from the output at absolute position
    /// `context_len - 1 + j`.
    pub logits: Mat<T>,
    /// Final-norm hidden states over the whole sequence.
    pub hidden: Mat<T>,
    pub trace: Option<AttentionTrace>,
}

pub(crate) struct LayerCache<T> {
    pub xhat1: Mat<T>,
    pub rstd1: Vec<T>,
    /// q and k after rotary embedding; v as projected.
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    /// Per-head attention probabilities, rows lower-triangular.
    pub probs: Vec<Mat<T>>,
    /// Concatenated head outputs, the input to wo.
    pub ctx: Mat<T>,
    pub xhat2: Mat<T>,
    pub rstd2: Vec<T>,
    pub h_pre: Mat<T>,
    pub h_act: Mat<T>,
}

pub(crate) struct ForwardCaches<T> {
    pub layers: Vec<LayerCache<T>>,
    pub xhat_f: Mat<T>,
    pub rstd_f: Vec<T>,
}

/// Row-wise layer norm; returns (out, xhat, rstd).
pub(crate) fn layernorm<T: Real>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> (Mat<T>, Mat<T>, Vec<T>) {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = vec![T::zero(); x.rows];
    let inv_d = T::one() / T::of(d as f64);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let r = T::one() / (var + T::of(LAYERNORM_EPS)).sqrt();
        rstd[i] = r;
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xh[j] = h;
            o[j] = gamma[j] * h + beta[j];
        }
    }
    (out, xhat, rstd)
}

/// Builds the input embeddings for a run: instruct rows for the first
/// `instruct_len` positions, token embeddings elsewhere, plus the shared
/// source-index vector when enabled.
pub(crate) fn embed_inputs<T: Real>(
    params: &ModelParams<T>,
    ids: &[u32],
    index_ids: &[u16],
    instruct_len: usize,
) -> Result<Mat<T>> {
    let cfg = &params.cfg;
    let d = cfg.d_model;
    if ids.len() != index_ids.len() {
        return Err(TokenArError::invalid("ids and index ids differ in length"));
    }
    if instruct_len != cfg.instruct_len {
        return Err(TokenArError::invalid(format!(
            "bundle instruct length {} does not match model {}",
            instruct_len, cfg.instruct_len
        )));
    }
    let mut x0 = Mat::zeros(ids.len(), d);
    for (pos, (&id, &idx)) in ids.iter().zip(index_ids.iter()).enumerate() {
        let row = x0.row_mut(pos);
        if pos < instruct_len {
            row.copy_from_slice(params.instruct.row(pos));
        } else {
            if id as usize >= cfg.vocab_size {
                return Err(TokenArError::invalid(format!(
                    "token id {id} out of vocabulary {}",
                    cfg.vocab_size
                )));
            }
            row.copy_from_slice(params.token_embedding.row(id as usize));
        }
        if cfg.index_embedding_enabled {
            if idx as usize >= cfg.index_vocab {
                return Err(TokenArError::invalid(format!(
                    "index id {idx} out of table {}",
                    cfg.index_vocab
                )));
            }
            let idx_row = params.index_table.row(idx as usize);
            for (a, &b) in row.iter_mut().zip(idx_row.iter()) {
                *a = *a + b;
            }
        }
    }
    Ok(x0)
}

/// One transformer block over the full sequence. Fills the cache when
/// `keep_probs` is set; otherwise attention rows live only transiently.
fn block_forward<T: Real>(
    params: &ModelParams<T>,
    layer: usize,
    x: &Mat<T>,
    angles: &[Vec<(f64, f64)>],
    keep_probs: bool,
    trace: Option<&mut AttentionTrace>,
) -> (Mat<T>, LayerCache<T>) {
    let cfg = &params.cfg;
    let lp = &params.layers[layer];
    let s = x.rows;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

    let (y1, xhat1, rstd1) = layernorm(x, &lp.ln1_gamma, &lp.ln1_beta);
    let mut q = Mat::zeros(s, d);
    let mut k = Mat::zeros(s, d);
    let mut v = Mat::zeros(s, d);
    matmul(&y1, &lp.wq, &mut q);
    matmul(&y1, &lp.wk, &mut k);
    matmul(&y1, &lp.wv, &mut v);
    for pos in 0..s {
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            rope_forward(&mut q.row_mut(pos)[span.clone()], &angles[pos]);
            rope_forward(&mut k.row_mut(pos)[span], &angles[pos]);
        }
    }

    let mut probs: Vec<Mat<T>> = if keep_probs {
        (0..heads).map(|_| Mat::zeros(s, s)).collect()
    } else {
        Vec::new()
    };
    let mut ctx = Mat::zeros(s, d);
    let mut trace = trace;
    for h in 0..heads {
        let span = h * dh..(h + 1) * dh;
        let mut row_buf = vec![T::zero(); s];
        for i in 0..s {
            let qi = &q.row(i)[span.clone()];
            for j in 0..=i {
                row_buf[j] = dot(qi, &k.row(j)[span.clone()]) * inv_sqrt;
            }
            softmax_inplace(&mut row_buf[..=i]);
            let ctx_i = &mut ctx.row_mut(i)[span.clone()];
            for j in 0..=i {
                let p = row_buf[j];
                let vj = &v.row(j)[span.clone()];
                for (c, &vv) in ctx_i.iter_mut().zip(vj.iter()) {
                    *c = *c + p * vv;
                }
            }
            if let Some(t) = trace.as_mut() {
                if t.query_span.contains(&i) {
                    t.push_row(layer, h, row_buf[..=i].iter().map(|p| p.as_f64()).collect());
                }
            }
            if keep_probs {
                probs[h].row_mut(i)[..=i].copy_from_slice(&row_buf[..=i]);
            }
        }
    }

    let mut attn_out = Mat::zeros(s, d);
    matmul(&ctx, &lp.wo, &mut attn_out);
    let mut x_mid = x.clone();
    x_mid.add_assign(&attn_out);

    let (y2, xhat2, rstd2) = layernorm(&x_mid, &lp.ln2_gamma, &lp.ln2_beta);
    let mut h_pre = Mat::zeros(s, cfg.mlp_dim());
    matmul(&y2, &lp.w1, &mut h_pre);
    for i in 0..s {
        for (hv, &b) in h_pre.row_mut(i).iter_mut().zip(lp.b1.iter()) {
            *hv = *hv + b;
        }
    }
    let mut h_act = Mat::zeros(s, cfg.mlp_dim());
    for (a, &p) in h_act.data.iter_mut().zip(h_pre.data.iter()) {
        *a = gelu(p);
    }
    let mut mlp_out = Mat::zeros(s, d);
    matmul(&h_act, &lp.w2, &mut mlp_out);
    for i in 0..s {
        for (mv, &b) in mlp_out.row_mut(i).iter_mut().zip(lp.b2.iter()) {
            *mv = *mv + b;
        }
    }
    let mut x_out = x_mid.clone();
    x_out.add_assign(&mlp_out);

    let cache = LayerCache {
        xhat1,
        rstd1,
        q,
        k,
        v,
        probs,
        ctx,
        xhat2,
        rstd2,
        h_pre,
        h_act,
    };
    (x_out, cache)
}

pub(crate) fn run_forward<T: Real>(
    params: &ModelParams<T>,
    bundle: &SequenceBundle,
    capture: Option<&TraceSpec>,
    want_caches: bool,
) -> Result<(ForwardOutput<T>, Option<ForwardCaches<T>>)> {
    let cfg = &params.cfg;
    let full_ids = bundle.full_ids();
    let s = full_ids.len();
    if s > cfg.max_seq_len {
        return Err(TokenArError::invalid(format!(
            "sequence length {s} exceeds max {}",
            cfg.max_seq_len
        )));
    }
    if bundle.index_ids.len() != s {
        return Err(TokenArError::invalid("index ids do not cover the sequence"));
    }
    let ctx_len = bundle.context_ids.len();
    let span_len = bundle.target_ids.len();
    if ctx_len == 0 {
        return Err(TokenArError::invalid("empty context"));
    }

    let x0 = embed_inputs(params, &full_ids, &bundle.index_ids, bundle.instruct_len)?;
    let angles: Vec<Vec<(f64, f64)>> = bundle
        .position_ids
        .iter()
        .map(|&p| rope_angles(p as usize, cfg.head_dim()))
        .collect();

    let mut trace = capture.map(|spec| AttentionTrace::new(cfg.n_layers, cfg.n_heads, spec));
    let mut caches = Vec::with_capacity(if want_caches { cfg.n_layers } else { 0 });
    let mut x = x0.clone();
    for layer in 0..cfg.n_layers {
        let (x_next, cache) = block_forward(
            params,
            layer,
            &x,
            &angles,
            want_caches,
            trace.as_mut(),
        );
        if want_caches {
            caches.push(cache);
        }
        x = x_next;
    }

    let (hidden, xhat_f, rstd_f) = layernorm(&x, &params.final_gamma, &params.final_beta);

    // Logits for predicted position j come from output position ctx-1+j.
    let mut h_span = Mat::zeros(span_len, cfg.d_model);
    for j in 0..span_len {
        h_span.row_mut(j).copy_from_slice(hidden.row(ctx_len - 1 + j));
    }
    let mut logits = Mat::zeros(span_len, cfg.vocab_size);
    matmul(&h_span, &params.head, &mut logits);

    let out = ForwardOutput {
        logits,
        hidden,
        trace,
    };
    let caches = if want_caches {
        Some(ForwardCaches {
            layers: caches,
            xhat_f,
            rstd_f,
        })
    } else {
        None
    };
    Ok((out, caches))
}

/// Teacher-forced forward pass; logits cover the predicted span.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    bundle: &SequenceBundle,
    capture: Option<&TraceSpec>,
) -> Result<ForwardOutput<T>> {
    run_forward(params, bundle, capture, false).map(|(out, _)| out)
}
