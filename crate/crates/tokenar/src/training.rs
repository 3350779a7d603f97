//! Training: the combined objective, AdamW, instruct-token updates, and the
//! training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenArError};
use crate::mat::{matmul, Mat};
use crate::model::{self, LossSpec, ModelParams};
use crate::rng;
use crate::scalar::Real;
use crate::sequence::SequenceBundle;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Constant learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda_distill: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Seed of the frozen distillation teacher; shared across runs so
    /// variants stay comparable.
    pub teacher_seed: u64,
    pub itd_enabled: bool,
    pub instruct_enabled: bool,
    /// Instruct token count M when enabled.
    pub instruct_len: usize,
    /// Update instruct tokens by plain gradient descent instead of jointly
    /// with the main parameters.
    pub standalone_instruct_sgd: bool,
    /// Extra checkpoints every this many steps; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Stop early once masked-token batch accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            lambda_distill: 0.5,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            teacher_seed: 0xD157_11,
            itd_enabled: true,
            instruct_enabled: true,
            instruct_len: 30,
            standalone_instruct_sgd: false,
            checkpoint_interval: 0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(TokenArError::invalid("learning rate must be positive"));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(TokenArError::invalid("betas must lie in (0,1)"));
        }
        if self.lambda_distill < 0.0 {
            return Err(TokenArError::invalid("lambda_distill must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(TokenArError::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// AdamW first/second moments; shapes mirror the parameters.
pub struct OptState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: usize,
}

impl<T: Real> OptState<T> {
    pub fn new(cfg: &model::ModelConfig) -> Self {
        OptState {
            m: ModelParams::zeros_like(cfg),
            v: ModelParams::zeros_like(cfg),
            step: 0,
        }
    }
}

/// Masked mean negative log-likelihood plus the per-token values.
pub fn ce_loss<T: Real>(
    logits: &Mat<T>,
    target_ids: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    if target_ids.len() != logits.rows || loss_mask.len() != logits.rows {
        return Err(TokenArError::invalid(format!(
            "ce_loss shapes disagree: {} logit rows, {} targets, {} mask entries",
            logits.rows,
            target_ids.len(),
            loss_mask.len()
        )));
    }
    if !loss_mask.iter().any(|&m| m) {
        return Err(TokenArError::invalid("ce_loss over an empty mask"));
    }
    let mut per_token = Vec::with_capacity(logits.rows);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for row in 0..logits.rows {
        if !loss_mask[row] {
            per_token.push(0.0);
            continue;
        }
        let l = logits.row(row);
        let target = target_ids[row] as usize;
        if target >= l.len() {
            return Err(TokenArError::invalid(format!(
                "target id {target} out of vocabulary {}",
                l.len()
            )));
        }
        let mut max = T::neg_infinity();
        for &x in l {
            if x > max {
                max = x;
            }
        }
        let mut denom = T::zero();
        for &x in l {
            denom = denom + (x - max).exp();
        }
        let nll = (denom.ln() + max - l[target]).as_f64();
        per_token.push(nll);
        sum += nll;
        count += 1;
    }
    Ok((sum / count as f64, per_token))
}

/// Frozen teacher: one-hot target tokens mean-pooled over 2x2 neighborhoods,
/// then mapped through a seeded random projection.
pub fn teacher_features<T: Real>(
    target_tokens: &[u32],
    grid_rows: usize,
    grid_cols: usize,
    image_vocab: usize,
    distill_dim: usize,
    teacher_seed: u64,
) -> Result<Mat<T>> {
    if target_tokens.len() != grid_rows * grid_cols {
        return Err(TokenArError::invalid(format!(
            "target has {} tokens, grid is {grid_rows}x{grid_cols}",
            target_tokens.len()
        )));
    }
    if grid_rows % 2 != 0 || grid_cols % 2 != 0 {
        return Err(TokenArError::invalid(
            "teacher pooling needs even grid dimensions",
        ));
    }
    let proj = teacher_projection(image_vocab, distill_dim, teacher_seed);
    let blocks = (grid_rows / 2) * (grid_cols / 2);
    let mut pooled = Mat::<f64>::zeros(blocks, image_vocab);
    let mut b = 0usize;
    for br in 0..grid_rows / 2 {
        for bc in 0..grid_cols / 2 {
            let row = pooled.row_mut(b);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let tok = target_tokens[(2 * br + dr) * grid_cols + (2 * bc + dc)] as usize;
                if tok >= image_vocab {
                    return Err(TokenArError::invalid(format!(
                        "target token {tok} outside image vocabulary {image_vocab}"
                    )));
                }
                row[tok] += 0.25;
            }
            b += 1;
        }
    }
    let mut out = Mat::<f64>::zeros(blocks, distill_dim);
    matmul(&pooled, &proj, &mut out);
    Ok(Mat {
        rows: out.rows,
        cols: out.cols,
        data: out.data.into_iter().map(T::of).collect(),
    })
}

fn teacher_projection(image_vocab: usize, distill_dim: usize, seed: u64) -> Mat<f64> {
    let mut r = rng::stream(seed, 0x7EAC);
    let std = 1.0 / (image_vocab as f64).sqrt();
    let mut data = vec![0.0f64; image_vocab * distill_dim];
    rng::fill_normal(&mut r, std, &mut data);
    Mat::from_vec(image_vocab, distill_dim, data)
}

/// Mean squared error between projected student features and the teacher's.
pub fn distill_loss<T: Real>(
    hidden_pooled: &Mat<T>,
    projection: &Mat<T>,
    teacher: &Mat<T>,
) -> Result<f64> {
    let mut student = Mat::zeros(hidden_pooled.rows, projection.cols);
    matmul(hidden_pooled, projection, &mut student);
    if student.rows != teacher.rows || student.cols != teacher.cols {
        return Err(TokenArError::invalid(format!(
            "student features {}x{} vs teacher {}x{}",
            student.rows, student.cols, teacher.rows, teacher.cols
        )));
    }
    let mut sum = 0.0;
    for (a, b) in student.data.iter().zip(teacher.data.iter()) {
        let d = (*a - *b).as_f64();
        sum += d * d;
    }
    Ok(sum / student.data.len() as f64)
}

/// The combined objective.
pub fn total_loss(ce: f64, distill: f64, lambda_distill: f64) -> f64 {
    ce + lambda_distill * distill
}

/// One decoupled-weight-decay Adam step over every tensor.
pub fn adamw_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    opt: &mut OptState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    for (_, _, g) in grads.tensors() {
        if g.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(TokenArError::Numeric("non-finite gradient".into()));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let lr = T::of(cfg.lr);
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let eps = T::of(ADAM_EPS);
    let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
    let bias1 = T::of(1.0 / (1.0 - cfg.beta1.powi(t)));
    let bias2 = T::of(1.0 / (1.0 - cfg.beta2.powi(t)));

    let standalone_instruct = cfg.standalone_instruct_sgd;
    let gts = grads.tensors();
    let mut mts = opt.m.tensors_mut();
    let mut vts = opt.v.tensors_mut();
    for (i, pt) in params.tensors_mut().into_iter().enumerate() {
        let (name, _, gt) = &gts[i];
        if standalone_instruct && name == "instruct" {
            // Algorithm-style plain gradient descent on P.
            for (p, &g) in pt.iter_mut().zip(gt.iter()) {
                *p = *p - lr * g;
            }
            continue;
        }
        let mt = &mut mts[i];
        let vt = &mut vts[i];
        for (((p, &g), m), v) in pt.iter_mut().zip(gt.iter()).zip(mt.iter_mut()).zip(vt.iter_mut())
        {
            *p = *p * decay;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m * bias1;
            let v_hat = *v * bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient-descent update on the instruct tokens.
pub fn instruct_token_update<T: Real>(p: &mut Mat<T>, grad: &Mat<T>, lr: f64) {
    let lr = T::of(lr);
    for (a, &g) in p.data.iter_mut().zip(grad.data.iter()) {
        *a = *a - lr * g;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub distill: f64,
    pub total: f64,
    pub lr: f64,
    pub accuracy: f64,
}

pub struct TrainResult<T> {
    pub params: ModelParams<T>,
    pub metrics: Vec<StepMetrics>,
    pub final_accuracy: f64,
    pub steps_run: usize,
}

/// Trains on prebuilt bundles. Batches cycle through a per-epoch seeded
/// shuffle. Per-sample gradients are computed in parallel and reduced in
/// sample order, so results do not depend on the thread count.
pub fn train_loop<T: Real>(
    mut params: ModelParams<T>,
    bundles: &[SequenceBundle],
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    if bundles.is_empty() {
        return Err(TokenArError::invalid("training dataset is empty"));
    }
    let model_cfg = params.cfg.clone();
    // Teachers are frozen per sample; precompute them.
    let teachers: Vec<Option<Mat<T>>> = if cfg.lambda_distill > 0.0 {
        bundles
            .iter()
            .map(|b| {
                let layout = &b.layout;
                let n = layout.tokens_per_image();
                let target = &b.target_ids[b.target_ids.len() - n..];
                teacher_features(
                    target,
                    layout.grid_rows,
                    layout.grid_cols,
                    model_cfg.image_vocab,
                    model_cfg.distill_dim,
                    cfg.teacher_seed,
                )
                .map(Some)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        bundles.iter().map(|_| None).collect()
    };

    let mut opt = OptState::<T>::new(&model_cfg);
    let mut order_rng = rng::stream(cfg.seed, 0x0EDE);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut csv = String::from("step,ce,distill,total,lr\n");
    let mut final_accuracy = 0.0;
    let mut steps_run = 0usize;

    if let Some(out) = out {
        if cfg.checkpoint_interval > 0 || cfg.steps == 0 {
            model::save_checkpoint(&out.checkpoint_at(0), &params)?;
        }
    }

    for step in 1..=cfg.steps {
        // Refill the epoch order as needed.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = rng::shuffled_indices(&mut order_rng, bundles.len());
                order.reverse();
            }
            batch.push(order.pop().unwrap());
        }

        let per_sample: Vec<Result<(model::LossBreakdown, ModelParams<T>)>> = batch
            .par_iter()
            .map(|&i| {
                let spec = LossSpec {
                    target_ids: &bundles[i].target_ids,
                    loss_mask: &bundles[i].loss_mask,
                    lambda_distill: cfg.lambda_distill,
                    teacher: teachers[i].as_ref(),
                };
                model::loss_and_gradients(&params, &bundles[i], &spec)
            })
            .collect();

        let mut grads = ModelParams::<T>::zeros_like(&model_cfg);
        let mut ce_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut masked = 0usize;
        let mut correct = 0usize;
        let count = per_sample.len();
        for res in per_sample {
            let (breakdown, g) = res?;
            grads.accumulate(&g);
            ce_sum += breakdown.ce;
            distill_sum += breakdown.distill;
            masked += breakdown.masked;
            correct += breakdown.correct;
        }
        grads.scale_all(T::of(1.0 / count as f64));
        adamw_step(&mut params, &grads, &mut opt, cfg)?;

        let ce = ce_sum / count as f64;
        let distill = distill_sum / count as f64;
        let total = total_loss(ce, distill, cfg.lambda_distill);
        if !total.is_finite() {
            return Err(TokenArError::Numeric(format!(
                "loss diverged at step {step}"
            )));
        }
        let accuracy = if masked > 0 {
            correct as f64 / masked as f64
        } else {
            0.0
        };
        final_accuracy = accuracy;
        steps_run = step;
        csv.push_str(&format!("{step},{ce},{distill},{total},{}\n", cfg.lr));
        metrics.push(StepMetrics {
            step,
            ce,
            distill,
            total,
            lr: cfg.lr,
            accuracy,
        });

        if let Some(out) = out {
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                model::save_checkpoint(&out.checkpoint_at(step), &params)?;
            }
        }
        if let Some(target) = cfg.target_accuracy {
            if accuracy >= target {
                break;
            }
        }
    }

    if let Some(out) = out {
        model::save_checkpoint(&out.final_checkpoint(), &params)?;
        fs::write(&out.metrics_csv, csv).map_err(|e| TokenArError::io(&out.metrics_csv, e))?;
    }

    Ok(TrainResult {
        params,
        metrics,
        final_accuracy,
        steps_run,
    })
}

/// Where a training run writes its artifacts.
pub struct TrainOutputs {
    pub dir: PathBuf,
    pub metrics_csv: PathBuf,
}

impl TrainOutputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| TokenArError::io(dir, e))?;
        Ok(TrainOutputs {
            dir: dir.to_path_buf(),
            metrics_csv: dir.join("metrics.csv"),
        })
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.tkar")
    }

    pub fn checkpoint_at(&self, step: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_{step:06}.tkar"))
    }
}

/// Writes the metrics CSV for a finished run; used by replays that bypass
/// `train_loop`'s own writer.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut s = String::from("step,ce,distill,total,lr\n");
    for m in metrics {
        let _ = writeln!(s, "{},{},{},{},{}", m.step, m.ce, m.distill, m.total, m.lr);
    }
    fs::write(path, s).map_err(|e| TokenArError::io(path, e))
}
