//! Decoder-only causal transformer with rotary positions, additive source
//! index embeddings, learnable instruct tokens, and exact reverse-mode
//! gradients for every parameter tensor.

mod backward;
mod cache;
mod checkpoint;
mod forward;
mod trace;

pub use backward::{gradients, loss, loss_and_gradients, LossBreakdown, LossSpec};
pub use cache::{decode_step, prefill, DecodeCache};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, ForwardOutput};
pub use trace::{AttentionTrace, TraceSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenArError};
use crate::mat::Mat;
use crate::rng;
use crate::scalar::Real;

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Full vocabulary: image tokens, prompt ids, placeholder.
    pub vocab_size: usize,
    /// Leading ids that are image tokens; decoding restricts to this range.
    pub image_vocab: usize,
    pub max_seq_len: usize,
    /// Instruct token count M.
    pub instruct_len: usize,
    /// Source-index table rows (max subjects + 3).
    pub index_vocab: usize,
    pub distill_dim: usize,
    /// When false the index table is ignored by the forward pass.
    pub index_embedding_enabled: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(TokenArError::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(TokenArError::invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(TokenArError::invalid(
                "head dimension must be even for rotary embedding",
            ));
        }
        if self.vocab_size <= self.image_vocab {
            return Err(TokenArError::invalid(format!(
                "vocab {} must exceed image vocab {}",
                self.vocab_size, self.image_vocab
            )));
        }
        if self.index_vocab == 0 || self.max_seq_len == 0 || self.distill_dim == 0 {
            return Err(TokenArError::invalid(
                "index vocab, max sequence length, and distill dim must be positive",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

/// Every learnable tensor of the model. Doubles as the gradient container:
/// gradients come back in the same shape family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub token_embedding: Mat<T>,
    pub index_table: Mat<T>,
    /// Instruct token embeddings P, occupying the first M positions directly.
    pub instruct: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: Vec<T>,
    pub final_beta: Vec<T>,
    pub head: Mat<T>,
    /// Training-only projection aligning hidden features with the teacher.
    pub distill_proj: Mat<T>,
}

/// Deterministic initialization: instruct tokens and the id-0 index row start
/// at exactly zero, every other weight is drawn N(0, 0.02) from the seed.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut r = rng::stream(seed, 0x1417);
    let mut normal_mat = |rows: usize, cols: usize| -> Mat<T> {
        let mut buf = vec![0.0f64; rows * cols];
        rng::fill_normal(&mut r, INIT_STD, &mut buf);
        Mat::from_vec(rows, cols, buf.into_iter().map(T::of).collect())
    };

    let token_embedding = normal_mat(cfg.vocab_size, d);
    let mut index_table = normal_mat(cfg.index_vocab, d);
    index_table.row_mut(0).iter_mut().for_each(|x| *x = T::zero());
    let instruct = Mat::zeros(cfg.instruct_len, d);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerParams {
            ln1_gamma: vec![T::one(); d],
            ln1_beta: vec![T::zero(); d],
            wq: normal_mat(d, d),
            wk: normal_mat(d, d),
            wv: normal_mat(d, d),
            wo: normal_mat(d, d),
            ln2_gamma: vec![T::one(); d],
            ln2_beta: vec![T::zero(); d],
            w1: normal_mat(d, cfg.mlp_dim()),
            b1: vec![T::zero(); cfg.mlp_dim()],
            w2: normal_mat(cfg.mlp_dim(), d),
            b2: vec![T::zero(); d],
        });
    }

    Ok(ModelParams {
        cfg: cfg.clone(),
        token_embedding,
        index_table,
        instruct,
        layers,
        final_gamma: vec![T::one(); d],
        final_beta: vec![T::zero(); d],
        head: normal_mat(d, cfg.vocab_size),
        distill_proj: normal_mat(d, cfg.distill_dim),
    })
}

impl<T: Real> ModelParams<T> {
    /// All-zero tensors with the same shapes; gradient and moment container.
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = || LayerParams {
            ln1_gamma: vec![T::zero(); d],
            ln1_beta: vec![T::zero(); d],
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            ln2_gamma: vec![T::zero(); d],
            ln2_beta: vec![T::zero(); d],
            w1: Mat::zeros(d, cfg.mlp_dim()),
            b1: vec![T::zero(); cfg.mlp_dim()],
            w2: Mat::zeros(cfg.mlp_dim(), d),
            b2: vec![T::zero(); d],
        };
        ModelParams {
            cfg: cfg.clone(),
            token_embedding: Mat::zeros(cfg.vocab_size, d),
            index_table: Mat::zeros(cfg.index_vocab, d),
            instruct: Mat::zeros(cfg.instruct_len, d),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            final_gamma: vec![T::zero(); d],
            final_beta: vec![T::zero(); d],
            head: Mat::zeros(d, cfg.vocab_size),
            distill_proj: Mat::zeros(d, cfg.distill_dim),
        }
    }

    /// Named views of every tensor, in a fixed order shared by gradients,
    /// optimizer state, and checkpoints.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        out.push((
            "token_embedding".into(),
            vec![self.token_embedding.rows, self.token_embedding.cols],
            self.token_embedding.data.as_slice(),
        ));
        out.push((
            "index_table".into(),
            vec![self.index_table.rows, self.index_table.cols],
            self.index_table.data.as_slice(),
        ));
        out.push((
            "instruct".into(),
            vec![self.instruct.rows, self.instruct.cols],
            self.instruct.data.as_slice(),
        ));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1_gamma"), vec![l.ln1_gamma.len()], &l.ln1_gamma));
            out.push((format!("layers.{i}.ln1_beta"), vec![l.ln1_beta.len()], &l.ln1_beta));
            out.push((format!("layers.{i}.wq"), vec![l.wq.rows, l.wq.cols], &l.wq.data));
            out.push((format!("layers.{i}.wk"), vec![l.wk.rows, l.wk.cols], &l.wk.data));
            out.push((format!("layers.{i}.wv"), vec![l.wv.rows, l.wv.cols], &l.wv.data));
            out.push((format!("layers.{i}.wo"), vec![l.wo.rows, l.wo.cols], &l.wo.data));
            out.push((format!("layers.{i}.ln2_gamma"), vec![l.ln2_gamma.len()], &l.ln2_gamma));
            out.push((format!("layers.{i}.ln2_beta"), vec![l.ln2_beta.len()], &l.ln2_beta));
            out.push((format!("layers.{i}.w1"), vec![l.w1.rows, l.w1.cols], &l.w1.data));
            out.push((format!("layers.{i}.b1"), vec![l.b1.len()], &l.b1));
            out.push((format!("layers.{i}.w2"), vec![l.w2.rows, l.w2.cols], &l.w2.data));
            out.push((format!("layers.{i}.b2"), vec![l.b2.len()], &l.b2));
        }
        out.push(("final_gamma".into(), vec![self.final_gamma.len()], &self.final_gamma));
        out.push(("final_beta".into(), vec![self.final_beta.len()], &self.final_beta));
        out.push(("head".into(), vec![self.head.rows, self.head.cols], &self.head.data));
        out.push((
            "distill_proj".into(),
            vec![self.distill_proj.rows, self.distill_proj.cols],
            &self.distill_proj.data,
        ));
        out
    }

    /// Mutable views in the same fixed order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        out.push(self.token_embedding.data.as_mut_slice());
        out.push(self.index_table.data.as_mut_slice());
        out.push(self.instruct.data.as_mut_slice());
        for l in self.layers.iter_mut() {
            out.push(l.ln1_gamma.as_mut_slice());
            out.push(l.ln1_beta.as_mut_slice());
            out.push(l.wq.data.as_mut_slice());
            out.push(l.wk.data.as_mut_slice());
            out.push(l.wv.data.as_mut_slice());
            out.push(l.wo.data.as_mut_slice());
            out.push(l.ln2_gamma.as_mut_slice());
            out.push(l.ln2_beta.as_mut_slice());
            out.push(l.w1.data.as_mut_slice());
            out.push(l.b1.as_mut_slice());
            out.push(l.w2.data.as_mut_slice());
            out.push(l.b2.as_mut_slice());
        }
        out.push(self.final_gamma.as_mut_slice());
        out.push(self.final_beta.as_mut_slice());
        out.push(self.head.data.as_mut_slice());
        out.push(self.distill_proj.data.as_mut_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// self += other over every tensor.
    pub fn accumulate(&mut self, other: &ModelParams<T>) {
        let theirs = other.tensors();
        for (mine, (_, _, others)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(others.iter()) {
                *a = *a + *b;
            }
        }
    }

    /// self *= s over every tensor.
    pub fn scale_all(&mut self, s: T) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn map_width<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            token_embedding: self.token_embedding.map_width(),
            index_table: self.index_table.map_width(),
            instruct: self.instruct.map_width(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: conv(&l.ln1_gamma),
                    ln1_beta: conv(&l.ln1_beta),
                    wq: l.wq.map_width(),
                    wk: l.wk.map_width(),
                    wv: l.wv.map_width(),
                    wo: l.wo.map_width(),
                    ln2_gamma: conv(&l.ln2_gamma),
                    ln2_beta: conv(&l.ln2_beta),
                    w1: l.w1.map_width(),
                    b1: conv(&l.b1),
                    w2: l.w2.map_width(),
                    b2: conv(&l.b2),
                })
                .collect(),
            final_gamma: conv(&self.final_gamma),
            final_beta: conv(&self.final_beta),
            head: self.head.map_width(),
            distill_proj: self.distill_proj.map_width(),
        }
    }
}

fn conv<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::of(x.as_f64())).collect()
}

/// Cos/sin table for rotary embedding at one position.
pub(crate) fn rope_angles(position: usize, head_dim: usize) -> Vec<(f64, f64)> {
    let half = head_dim / 2;
    (0..half)
        .map(|j| {
            let freq = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
            let angle = position as f64 * freq;
            (angle.cos(), angle.sin())
        })
        .collect()
}

/// Rotates the (first-half, second-half) pairs of one head slice in place.
pub(crate) fn rope_forward<T: Real>(slice: &mut [T], angles: &[(f64, f64)]) {
    let half = slice.len() / 2;
    for (j, &(c, s)) in angles.iter().enumerate().take(half) {
        let (c, s) = (T::of(c), T::of(s));
        let x1 = slice[j];
        let x2 = slice[j + half];
        slice[j] = x1 * c - x2 * s;
        slice[j + half] = x1 * s + x2 * c;
    }
}

/// Transpose of the rotation: maps gradients w.r.t. rotated values back to
/// gradients w.r.t. the unrotated ones.
pub(crate) fn rope_backward<T: Real>(slice: &mut [T], angles: &[(f64, f64)]) {
    let half = slice.len() / 2;
    for (j, &(c, s)) in angles.iter().enumerate().take(half) {
        let (c, s) = (T::of(c), T::of(s));
        let d1 = slice[j];
        let d2 = slice[j + half];
        slice[j] = d1 * c + d2 * s;
        slice[j + half] = d2 * c - d1 * s;
    }
}

/// GELU (tanh approximation) and its derivative.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = T::of(0.044_715);
    let u = k * (x + c * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        vocab_size: 20,
        image_vocab: 8,
        max_seq_len: 64,
        instruct_len: 3,
        index_vocab: 5,
        distill_dim: 6,
        index_embedding_enabled: true,
    }
}
