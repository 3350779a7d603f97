//! Two-stage inference: parallel prefill into a KV cache, then one token per
//! step. Cached decoding reproduces full-recompute logits exactly (bit-exact
//! in f64, within rounding in f32).

use crate::error::{Result, TokenArError};
use crate::mat::{dot, softmax_inplace, Mat};
use crate::scalar::Real;
use crate::sequence::{SequenceBundle, SequenceLayout};

use super::forward::run_forward;
use super::trace::AttentionTrace;
use super::{gelu, rope_angles, rope_forward, ModelParams, LAYERNORM_EPS};

/// Per-layer keys/values for every processed position, plus the pending
/// next-token logits produced by the most recent prefill or decode step.
pub struct DecodeCache<T> {
    /// k[layer], v[layer]: rows 0..len hold processed positions.
    k: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    len: usize,
    next_logits: Vec<T>,
}

impl<T: Real> DecodeCache<T> {
    fn with_capacity(n_layers: usize, capacity: usize, d: usize) -> Self {
        DecodeCache {
            k: (0..n_layers).map(|_| Mat::zeros(capacity, d)).collect(),
            v: (0..n_layers).map(|_| Mat::zeros(capacity, d)).collect(),
            len: 0,
            next_logits: Vec::new(),
        }
    }

    /// Number of positions whose keys/values are cached.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits predicting the token at position `len()`, from the most recent
    /// prefill or decode step.
    pub fn next_logits(&self) -> &[T] {
        &self.next_logits
    }

    /// Bitwise equality of the cached keys/values; for determinism checks.
    pub fn bits_equal(&self, other: &DecodeCache<T>) -> bool {
        if self.len != other.len {
            return false;
        }
        let rows_eq = |a: &[Mat<T>], b: &[Mat<T>]| {
            a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.data[..self.len * x.cols] == y.data[..self.len * y.cols])
        };
        rows_eq(&self.k, &other.k) && rows_eq(&self.v, &other.v)
    }
}

/// Processes the whole conditioning prefix in parallel and returns a cache
/// holding keys/values for every context position. The cache also carries
/// the logits that predict the first post-context token.
pub fn prefill<T: Real>(
    params: &ModelParams<T>,
    context_ids: &[u32],
    index_ids: &[u16],
    instruct_len: usize,
) -> Result<DecodeCache<T>> {
    let cfg = &params.cfg;
    let s = context_ids.len();
    if s == 0 {
        return Err(TokenArError::invalid("cannot prefill an empty context"));
    }
    if s > cfg.max_seq_len {
        return Err(TokenArError::invalid(format!(
            "context length {s} exceeds max {}",
            cfg.max_seq_len
        )));
    }
    if index_ids.len() != s {
        return Err(TokenArError::invalid(
            "index ids do not cover the context",
        ));
    }
    // Run the batched forward over the context alone (no predicted rows) and
    // lift its per-layer roped keys/values into the cache.
    let bundle = SequenceBundle {
        context_ids: context_ids.to_vec(),
        target_ids: Vec::new(),
        index_ids: index_ids.to_vec(),
        position_ids: (0..s as u32).collect(),
        loss_mask: Vec::new(),
        instruct_len,
        layout: SequenceLayout {
            m: 1,
            grid_rows: 1,
            grid_cols: 1,
            instruct_len,
            prompt_len: 0,
            itd_enabled: false,
        },
    };
    let (out, caches) = run_forward(params, &bundle, None, true)?;
    let caches = caches.expect("caches requested");

    let mut cache = DecodeCache::with_capacity(cfg.n_layers, cfg.max_seq_len, cfg.d_model);
    for (layer, lc) in caches.layers.iter().enumerate() {
        cache.k[layer].data[..s * cfg.d_model].copy_from_slice(&lc.k.data);
        cache.v[layer].data[..s * cfg.d_model].copy_from_slice(&lc.v.data);
    }
    cache.len = s;
    cache.next_logits = mat_vec(out.hidden.row(s - 1), &params.head);
    Ok(cache)
}

/// Appends `last_token_id` at `position` and returns logits for the token
/// after it. `position` must equal the current cache length.
pub fn decode_step<T: Real>(
    params: &ModelParams<T>,
    cache: &mut DecodeCache<T>,
    last_token_id: u32,
    index_id: u16,
    position: usize,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Vec<T>> {
    let cfg = &params.cfg;
    if position != cache.len {
        return Err(TokenArError::invalid(format!(
            "decode position {position} does not match cache length {}",
            cache.len
        )));
    }
    if cache.len >= cfg.max_seq_len {
        return Err(TokenArError::invalid(format!(
            "cache full at max sequence length {}",
            cfg.max_seq_len
        )));
    }
    if last_token_id as usize >= cfg.vocab_size {
        return Err(TokenArError::invalid(format!(
            "token id {last_token_id} out of vocabulary {}",
            cfg.vocab_size
        )));
    }
    if index_id as usize >= cfg.index_vocab {
        return Err(TokenArError::invalid(format!(
            "index id {index_id} out of table {}",
            cfg.index_vocab
        )));
    }

    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
    let angles = rope_angles(position, dh);

    // Decoded tokens are ordinary vocabulary tokens; instruct vectors only
    // ever occupy prefilled context positions.
    let mut x = params.token_embedding.row(last_token_id as usize).to_vec();
    if cfg.index_embedding_enabled {
        for (a, &b) in x.iter_mut().zip(params.index_table.row(index_id as usize)) {
            *a = *a + b;
        }
    }

    for layer in 0..cfg.n_layers {
        let lp = &params.layers[layer];
        let y1 = layernorm_row(&x, &lp.ln1_gamma, &lp.ln1_beta);
        let mut q = mat_vec(&y1, &lp.wq);
        let mut k = mat_vec(&y1, &lp.wk);
        let v = mat_vec(&y1, &lp.wv);
        for h in 0..heads {
            rope_forward(&mut q[h * dh..(h + 1) * dh], &angles);
            rope_forward(&mut k[h * dh..(h + 1) * dh], &angles);
        }
        cache.k[layer].row_mut(position).copy_from_slice(&k);
        cache.v[layer].row_mut(position).copy_from_slice(&v);

        let mut ctx = vec![T::zero(); d];
        let keys = &cache.k[layer];
        let vals = &cache.v[layer];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let mut scores = vec![T::zero(); position + 1];
            for (j, sc) in scores.iter_mut().enumerate() {
                *sc = dot(&q[span.clone()], &keys.row(j)[span.clone()]) * inv_sqrt;
            }
            softmax_inplace(&mut scores);
            if let Some(t) = trace.as_mut() {
                if t.query_span.contains(&position) {
                    t.push_row(layer, h, scores.iter().map(|p| p.as_f64()).collect());
                }
            }
            let ctx_h = &mut ctx[span.clone()];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &vals.row(j)[span.clone()];
                for (c, &vv) in ctx_h.iter_mut().zip(vj.iter()) {
                    *c = *c + p * vv;
                }
            }
        }
        let attn_out = mat_vec(&ctx, &lp.wo);
        for (a, &b) in x.iter_mut().zip(attn_out.iter()) {
            *a = *a + b;
        }

        let y2 = layernorm_row(&x, &lp.ln2_gamma, &lp.ln2_beta);
        let mut h_pre = mat_vec(&y2, &lp.w1);
        for (hv, &b) in h_pre.iter_mut().zip(lp.b1.iter()) {
            *hv = *hv + b;
        }
        let h_act: Vec<T> = h_pre.iter().map(|&p| gelu(p)).collect();
        let mut mlp_out = mat_vec(&h_act, &lp.w2);
        for (mv, &b) in mlp_out.iter_mut().zip(lp.b2.iter()) {
            *mv = *mv + b;
        }
        for (a, &b) in x.iter_mut().zip(mlp_out.iter()) {
            *a = *a + b;
        }
    }

    let hidden = layernorm_row(&x, &params.final_gamma, &params.final_beta);
    let logits = mat_vec(&hidden, &params.head);
    cache.len += 1;
    cache.next_logits = logits.clone();
    Ok(logits)
}

fn layernorm_row<T: Real>(x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let d = x.len();
    let inv_d = T::one() / T::of(d as f64);
    let mut mean = T::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean * inv_d;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var = var + c * c;
    }
    var = var * inv_d;
    let r = T::one() / (var + T::of(LAYERNORM_EPS)).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, &v)| gamma[j] * ((v - mean) * r) + beta[j])
        .collect()
}

/// Row vector times matrix: y = x . w, walking w row-major.
fn mat_vec<T: Real>(x: &[T], w: &Mat<T>) -> Vec<T> {
    debug_assert_eq!(x.len(), w.rows);
    let mut y = vec![T::zero(); w.cols];
    for (i, &xv) in x.iter().enumerate() {
        let row = w.row(i);
        for (a, &b) in y.iter_mut().zip(row.iter()) {
            *a = *a + xv * b;
        }
    }
    y
}
