//! Loss evaluation and exact reverse-mode gradients.
//!
//! The loss is masked-mean next-token cross-entropy plus an optional
//! distillation term: mean squared error between the projected, 2x2-pooled
//! hidden states at the target image positions and a frozen teacher.

use crate::error::{Result, TokenArError};
use crate::mat::{axpy, dot, matmul, matmul_nt, matmul_tn_acc, Mat};
use crate::scalar::Real;
use crate::sequence::SequenceBundle;

use super::forward::{run_forward, ForwardCaches};
use super::{gelu_grad, rope_angles, rope_backward, ModelParams};

#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a, T: Real> {
    pub target_ids: &'a [u32],
    pub loss_mask: &'a [bool],
    pub lambda_distill: f64,
    /// Teacher features, one row per 2x2 target block; required when
    /// `lambda_distill > 0`.
    pub teacher: Option<&'a Mat<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub distill: f64,
    pub total: f64,
    pub masked: usize,
    /// Masked positions whose argmax equals the target.
    pub correct: usize,
}

struct CeResult<T> {
    breakdown_ce: f64,
    masked: usize,
    correct: usize,
    /// d(ce)/d(logits), already divided by the masked count.
    dlogits: Mat<T>,
}

fn ce_forward_backward<T: Real>(
    logits: &Mat<T>,
    target_ids: &[u32],
    loss_mask: &[bool],
) -> Result<CeResult<T>> {
    if target_ids.len() != logits.rows || loss_mask.len() != logits.rows {
        return Err(TokenArError::invalid(format!(
            "loss spec covers {} targets, logits have {} rows",
            target_ids.len(),
            logits.rows
        )));
    }
    let masked = loss_mask.iter().filter(|&&m| m).count();
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    if masked == 0 {
        return Ok(CeResult {
            breakdown_ce: 0.0,
            masked,
            correct: 0,
            dlogits,
        });
    }
    let inv_count = T::one() / T::of(masked as f64);
    let mut nll_sum = 0.0f64;
    let mut correct = 0usize;
    for row in 0..logits.rows {
        if !loss_mask[row] {
            continue;
        }
        let target = target_ids[row] as usize;
        if target >= logits.cols {
            return Err(TokenArError::invalid(format!(
                "target id {target} out of vocabulary {}",
                logits.cols
            )));
        }
        let l = logits.row(row);
        let mut max = T::neg_infinity();
        let mut argmax = 0usize;
        for (i, &x) in l.iter().enumerate() {
            if x > max {
                max = x;
                argmax = i;
            }
        }
        if argmax == target {
            correct += 1;
        }
        let mut sum = T::zero();
        for &x in l {
            sum = sum + (x - max).exp();
        }
        let lse = sum.ln() + max;
        nll_sum += (lse - l[target]).as_f64();
        let inv_sum = T::one() / sum;
        let dl = dlogits.row_mut(row);
        for (i, &x) in l.iter().enumerate() {
            dl[i] = (x - max).exp() * inv_sum * inv_count;
        }
        dl[target] = dl[target] - inv_count;
    }
    Ok(CeResult {
        breakdown_ce: nll_sum / masked as f64,
        masked,
        correct,
        dlogits,
    })
}

/// Gathers the 2x2-pooled hidden rows of the target image span.
/// Returns (pooled [blocks x d], block -> absolute positions).
fn pool_target_hidden<T: Real>(
    hidden: &Mat<T>,
    bundle: &SequenceBundle,
) -> Result<(Mat<T>, Vec<[usize; 4]>)> {
    let layout = &bundle.layout;
    let (gr, gc) = (layout.grid_rows, layout.grid_cols);
    if gr % 2 != 0 || gc % 2 != 0 {
        return Err(TokenArError::invalid(format!(
            "distillation needs even token grid dims, got {gr}x{gc}"
        )));
    }
    let start = layout.target_span().start;
    let blocks = (gr / 2) * (gc / 2);
    let mut pooled = Mat::zeros(blocks, hidden.cols);
    let mut members = Vec::with_capacity(blocks);
    let quarter = T::of(0.25);
    let mut b = 0usize;
    for br in 0..gr / 2 {
        for bc in 0..gc / 2 {
            let ps = [
                start + (2 * br) * gc + 2 * bc,
                start + (2 * br) * gc + 2 * bc + 1,
                start + (2 * br + 1) * gc + 2 * bc,
                start + (2 * br + 1) * gc + 2 * bc + 1,
            ];
            let row = pooled.row_mut(b);
            for &p in &ps {
                for (acc, &h) in row.iter_mut().zip(hidden.row(p).iter()) {
                    *acc = *acc + h * quarter;
                }
            }
            members.push(ps);
            b += 1;
        }
    }
    Ok((pooled, members))
}

/// Evaluates the combined loss without computing gradients.
pub fn loss<T: Real>(
    params: &ModelParams<T>,
    bundle: &SequenceBundle,
    spec: &LossSpec<'_, T>,
) -> Result<LossBreakdown> {
    let (out, _) = run_forward(params, bundle, None, false)?;
    let ce = ce_forward_backward(&out.logits, spec.target_ids, spec.loss_mask)?;
    let distill = if spec.lambda_distill > 0.0 {
        let teacher = spec
            .teacher
            .ok_or_else(|| TokenArError::invalid("lambda_distill > 0 but no teacher features"))?;
        let (pooled, _) = pool_target_hidden(&out.hidden, bundle)?;
        let mut student = Mat::zeros(pooled.rows, params.distill_proj.cols);
        matmul(&pooled, &params.distill_proj, &mut student);
        mse(&student, teacher)?
    } else {
        0.0
    };
    finish_breakdown(ce.breakdown_ce, distill, spec.lambda_distill, ce.masked, ce.correct)
}

fn mse<T: Real>(student: &Mat<T>, teacher: &Mat<T>) -> Result<f64> {
    if student.rows != teacher.rows || student.cols != teacher.cols {
        return Err(TokenArError::invalid(format!(
            "student features {}x{} vs teacher {}x{}",
            student.rows, student.cols, teacher.rows, teacher.cols
        )));
    }
    let mut sum = 0.0f64;
    for (a, b) in student.data.iter().zip(teacher.data.iter()) {
        let d = (*a - *b).as_f64();
        sum += d * d;
    }
    Ok(sum / student.data.len() as f64)
}

fn finish_breakdown(
    ce: f64,
    distill: f64,
    lambda: f64,
    masked: usize,
    correct: usize,
) -> Result<LossBreakdown> {
    let total = ce + lambda * distill;
    if !total.is_finite() {
        return Err(TokenArError::Numeric(format!(
            "loss is not finite: ce={ce}, distill={distill}"
        )));
    }
    Ok(LossBreakdown {
        ce,
        distill,
        total,
        masked,
        correct,
    })
}

/// Combined loss and exact gradients for every parameter tensor.
pub fn loss_and_gradients<T: Real>(
    params: &ModelParams<T>,
    bundle: &SequenceBundle,
    spec: &LossSpec<'_, T>,
) -> Result<(LossBreakdown, ModelParams<T>)> {
    let cfg = &params.cfg;
    let (out, caches) = run_forward(params, bundle, None, true)?;
    let caches: ForwardCaches<T> = caches.expect("caches requested");
    let s = out.hidden.rows;
    let d = cfg.d_model;
    let ctx_len = bundle.context_ids.len();
    let span_len = bundle.target_ids.len();

    let ce = ce_forward_backward(&out.logits, spec.target_ids, spec.loss_mask)?;
    let mut grads = ModelParams::<T>::zeros_like(cfg);

    // d(total)/d(hidden): head path plus optional distillation path.
    let mut d_hidden = Mat::zeros(s, d);
    {
        // Head: logits_j = hidden[ctx-1+j] . head
        let mut h_span = Mat::zeros(span_len, d);
        for j in 0..span_len {
            h_span.row_mut(j).copy_from_slice(out.hidden.row(ctx_len - 1 + j));
        }
        matmul_tn_acc(&h_span, &ce.dlogits, &mut grads.head);
        let mut d_h_span = Mat::zeros(span_len, d);
        matmul_nt(&ce.dlogits, &params.head, &mut d_h_span);
        for j in 0..span_len {
            let dst = d_hidden.row_mut(ctx_len - 1 + j);
            for (a, &b) in dst.iter_mut().zip(d_h_span.row(j).iter()) {
                *a = *a + b;
            }
        }
    }

    let distill = if spec.lambda_distill > 0.0 {
        let teacher = spec
            .teacher
            .ok_or_else(|| TokenArError::invalid("lambda_distill > 0 but no teacher features"))?;
        let (pooled, members) = pool_target_hidden(&out.hidden, bundle)?;
        let mut student = Mat::zeros(pooled.rows, params.distill_proj.cols);
        matmul(&pooled, &params.distill_proj, &mut student);
        let value = mse(&student, teacher)?;
        // d(lambda * mse)/d(student)
        let scale = T::of(2.0 * spec.lambda_distill / student.data.len() as f64);
        let mut d_student = Mat::zeros(student.rows, student.cols);
        for ((ds, &st), &te) in d_student
            .data
            .iter_mut()
            .zip(student.data.iter())
            .zip(teacher.data.iter())
        {
            *ds = (st - te) * scale;
        }
        matmul_tn_acc(&pooled, &d_student, &mut grads.distill_proj);
        let mut d_pooled = Mat::zeros(pooled.rows, d);
        matmul_nt(&d_student, &params.distill_proj, &mut d_pooled);
        let quarter = T::of(0.25);
        for (b, ps) in members.iter().enumerate() {
            for &p in ps {
                let dst = d_hidden.row_mut(p);
                for (a, &g) in dst.iter_mut().zip(d_pooled.row(b).iter()) {
                    *a = *a + g * quarter;
                }
            }
        }
        value
    } else {
        0.0
    };

    // Final layer norm backward.
    let mut d_x = layernorm_backward(
        &d_hidden,
        &caches.xhat_f,
        &caches.rstd_f,
        &params.final_gamma,
        &mut grads.final_gamma,
        &mut grads.final_beta,
    );

    let angles: Vec<Vec<(f64, f64)>> = bundle
        .position_ids
        .iter()
        .map(|&p| rope_angles(p as usize, cfg.head_dim()))
        .collect();

    for layer in (0..cfg.n_layers).rev() {
        d_x = block_backward(params, layer, &caches.layers[layer], &d_x, &angles, &mut grads);
    }

    // Scatter input gradients to the embedding tables.
    let full_ids = bundle.full_ids();
    for pos in 0..s {
        let g = d_x.row(pos);
        if pos < bundle.instruct_len {
            let dst = grads.instruct.row_mut(pos);
            for (a, &b) in dst.iter_mut().zip(g.iter()) {
                *a = *a + b;
            }
        } else {
            let dst = grads.token_embedding.row_mut(full_ids[pos] as usize);
            for (a, &b) in dst.iter_mut().zip(g.iter()) {
                *a = *a + b;
            }
        }
        if cfg.index_embedding_enabled {
            let dst = grads.index_table.row_mut(bundle.index_ids[pos] as usize);
            for (a, &b) in dst.iter_mut().zip(g.iter()) {
                *a = *a + b;
            }
        }
    }

    let breakdown = finish_breakdown(
        ce.breakdown_ce,
        distill,
        spec.lambda_distill,
        ce.masked,
        ce.correct,
    )?;
    Ok((breakdown, grads))
}

/// Exact gradients only.
pub fn gradients<T: Real>(
    params: &ModelParams<T>,
    bundle: &SequenceBundle,
    spec: &LossSpec<'_, T>,
) -> Result<ModelParams<T>> {
    loss_and_gradients(params, bundle, spec).map(|(_, g)| g)
}

/// dy -> dx for layer norm, accumulating parameter gradients.
fn layernorm_backward<T: Real>(
    dy: &Mat<T>,
    xhat: &Mat<T>,
    rstd: &[T],
    gamma: &[T],
    d_gamma: &mut [T],
    d_beta: &mut [T],
) -> Mat<T> {
    let d = dy.cols;
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    for i in 0..dy.rows {
        let dy_row = dy.row(i);
        let xh = xhat.row(i);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let g = dy_row[j];
            d_gamma[j] = d_gamma[j] + g * xh[j];
            d_beta[j] = d_beta[j] + g;
            let dxh = g * gamma[j];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh[j];
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        let dst = dx.row_mut(i);
        for j in 0..d {
            let dxh = dy_row[j] * gamma[j];
            dst[j] = rstd[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Backward through one block; returns gradient w.r.t. the block input.
fn block_backward<T: Real>(
    params: &ModelParams<T>,
    layer: usize,
    cache: &super::forward::LayerCache<T>,
    d_out: &Mat<T>,
    angles: &[Vec<(f64, f64)>],
    grads: &mut ModelParams<T>,
) -> Mat<T> {
    let cfg = &params.cfg;
    let lp = &params.layers[layer];
    let gl = &mut grads.layers[layer];
    let s = d_out.rows;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

    // MLP half: x_out = x_mid + gelu(y2.w1 + b1).w2 + b2
    for i in 0..s {
        for (acc, &g) in gl.b2.iter_mut().zip(d_out.row(i).iter()) {
            *acc = *acc + g;
        }
    }
    matmul_tn_acc(&cache.h_act, d_out, &mut gl.w2);
    let mut d_h_act = Mat::zeros(s, cfg.mlp_dim());
    matmul_nt(d_out, &lp.w2, &mut d_h_act);
    let mut d_h_pre = d_h_act;
    for (g, &pre) in d_h_pre.data.iter_mut().zip(cache.h_pre.data.iter()) {
        *g = *g * gelu_grad(pre);
    }
    for i in 0..s {
        for (acc, &g) in gl.b1.iter_mut().zip(d_h_pre.row(i).iter()) {
            *acc = *acc + g;
        }
    }
    // Recompute y2 = gamma2 * xhat2 + beta2 for the w1 gradient.
    let mut y2 = Mat::zeros(s, d);
    for i in 0..s {
        let xh = cache.xhat2.row(i);
        let dst = y2.row_mut(i);
        for j in 0..d {
            dst[j] = lp.ln2_gamma[j] * xh[j] + lp.ln2_beta[j];
        }
    }
    matmul_tn_acc(&y2, &d_h_pre, &mut gl.w1);
    let mut d_y2 = Mat::zeros(s, d);
    matmul_nt(&d_h_pre, &lp.w1, &mut d_y2);
    let d_x_mid_ln = layernorm_backward(
        &d_y2,
        &cache.xhat2,
        &cache.rstd2,
        &lp.ln2_gamma,
        &mut gl.ln2_gamma,
        &mut gl.ln2_beta,
    );
    let mut d_x_mid = d_out.clone();
    d_x_mid.add_assign(&d_x_mid_ln);

    // Attention half: x_mid = x_in + ctx.wo
    matmul_tn_acc(&cache.ctx, &d_x_mid, &mut gl.wo);
    let mut d_ctx = Mat::zeros(s, d);
    matmul_nt(&d_x_mid, &lp.wo, &mut d_ctx);

    let mut d_q = Mat::zeros(s, d);
    let mut d_k = Mat::zeros(s, d);
    let mut d_v = Mat::zeros(s, d);
    let mut dp_row = vec![T::zero(); s];
    for h in 0..heads {
        let span = h * dh..(h + 1) * dh;
        let probs = &cache.probs[h];
        for i in 0..s {
            let d_ctx_i = &d_ctx.row(i)[span.clone()];
            let p_row = &probs.row(i)[..=i];
            // dV and dP.
            let mut dp_dot_p = T::zero();
            for j in 0..=i {
                let dp = dot(d_ctx_i, &cache.v.row(j)[span.clone()]);
                dp_row[j] = dp;
                dp_dot_p = dp_dot_p + dp * p_row[j];
                axpy(p_row[j], d_ctx_i, &mut d_v.row_mut(j)[span.clone()]);
            }
            // Softmax backward, then score scale.
            let qi = &cache.q.row(i)[span.clone()];
            let mut d_qi = vec![T::zero(); dh];
            for j in 0..=i {
                let ds = p_row[j] * (dp_row[j] - dp_dot_p) * inv_sqrt;
                axpy(ds, &cache.k.row(j)[span.clone()], &mut d_qi);
                axpy(ds, qi, &mut d_k.row_mut(j)[span.clone()]);
            }
            let dst = &mut d_q.row_mut(i)[span.clone()];
            for (a, &b) in dst.iter_mut().zip(d_qi.iter()) {
                *a = *a + b;
            }
        }
    }

    // Undo the rotation.
    for pos in 0..s {
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            rope_backward(&mut d_q.row_mut(pos)[span.clone()], &angles[pos]);
            rope_backward(&mut d_k.row_mut(pos)[span], &angles[pos]);
        }
    }

    // Projections from y1.
    let mut y1 = Mat::zeros(s, d);
    for i in 0..s {
        let xh = cache.xhat1.row(i);
        let dst = y1.row_mut(i);
        for j in 0..d {
            dst[j] = lp.ln1_gamma[j] * xh[j] + lp.ln1_beta[j];
        }
    }
    matmul_tn_acc(&y1, &d_q, &mut gl.wq);
    matmul_tn_acc(&y1, &d_k, &mut gl.wk);
    matmul_tn_acc(&y1, &d_v, &mut gl.wv);
    let mut d_y1 = Mat::zeros(s, d);
    matmul_nt(&d_q, &lp.wq, &mut d_y1);
    let mut tmp = Mat::zeros(s, d);
    matmul_nt(&d_k, &lp.wk, &mut tmp);
    d_y1.add_assign(&tmp);
    matmul_nt(&d_v, &lp.wv, &mut tmp);
    d_y1.add_assign(&tmp);

    let d_x_ln = layernorm_backward(
        &d_y1,
        &cache.xhat1,
        &cache.rstd1,
        &lp.ln1_gamma,
        &mut gl.ln1_gamma,
        &mut gl.ln1_beta,
    );
    let mut d_x = d_x_mid;
    d_x.add_assign(&d_x_ln);
    d_x
}
