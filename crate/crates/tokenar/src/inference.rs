//! Conditional generation: prefill the condition, decode the predicted span,
//! extract the target grid.

use rand::Rng as _;

use crate::error::{Result, TokenArError};
use crate::model::{self, AttentionTrace, DecodeCache, ModelParams, TraceSpec};
use crate::rng;
use crate::scalar::Real;
use crate::scene::SceneSample;
use crate::sequence::{build_training_sequence, SequenceBundle, SequenceLayout};
use crate::tokenizer::{Codebook, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Softmax sampling at temperature tau with a dedicated seed.
    Temperature { tau: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub mode: DecodeMode,
    pub top_k: Option<usize>,
    /// Capture attention rows for queries in the decoded span.
    pub capture: Option<TraceSpec>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: DecodeMode::Greedy,
            top_k: None,
            capture: None,
        }
    }
}

pub struct Generation {
    pub target: TokenGrid,
    /// The full decoded span (re-emitted references plus target under ITD).
    pub span: Vec<u32>,
    pub trace: Option<AttentionTrace>,
}

/// Decodes the predicted span for one scene sample.
pub fn generate<T: Real>(
    params: &ModelParams<T>,
    sample: &SceneSample,
    layout: &SequenceLayout,
    codebook: &Codebook,
    patch: usize,
    gcfg: &GenerateConfig,
) -> Result<Generation> {
    let bundle = build_training_sequence(sample, layout, codebook, patch)?;
    generate_from_context(params, &bundle, gcfg)
}

/// Decodes the predicted span given a prepared bundle; only the bundle's
/// context is consumed, its target ids are ignored.
pub fn generate_from_context<T: Real>(
    params: &ModelParams<T>,
    bundle: &SequenceBundle,
    gcfg: &GenerateConfig,
) -> Result<Generation> {
    let layout = &bundle.layout;
    if let DecodeMode::Temperature { tau, .. } = gcfg.mode {
        if tau <= 0.0 {
            return Err(TokenArError::invalid("temperature must be positive"));
        }
    }
    if layout.total_len() > params.cfg.max_seq_len {
        return Err(TokenArError::invalid(format!(
            "layout needs {} positions, model allows {}",
            layout.total_len(),
            params.cfg.max_seq_len
        )));
    }
    let ctx_len = bundle.context_ids.len();
    let span_len = layout.predicted_span_len();
    let image_vocab = params.cfg.image_vocab;

    let mut cache: DecodeCache<T> = model::prefill(
        params,
        &bundle.context_ids,
        &bundle.index_ids[..ctx_len],
        bundle.instruct_len,
    )?;
    let mut trace = gcfg
        .capture
        .as_ref()
        .map(|spec| AttentionTrace::new(params.cfg.n_layers, params.cfg.n_heads, spec));

    let mut sampler = match gcfg.mode {
        DecodeMode::Temperature { seed, .. } => Some(rng::stream(seed, 0x5A3)),
        DecodeMode::Greedy => None,
    };

    let mut span = Vec::with_capacity(span_len);
    let mut logits: Vec<T> = cache.next_logits().to_vec();
    for j in 0..span_len {
        let position = ctx_len + j;
        let token = select_token(&logits, image_vocab, &gcfg.mode, gcfg.top_k, sampler.as_mut())?;
        span.push(token);
        logits = model::decode_step(
            params,
            &mut cache,
            token,
            layout.index_id_for_position(position),
            position,
            trace.as_mut(),
        )?;
    }

    let target = extract_target(&span, layout)?;
    Ok(Generation {
        target,
        span,
        trace,
    })
}

/// Picks the next token among the image ids; everything past `image_vocab`
/// is masked to negative infinity.
fn select_token<T: Real>(
    logits: &[T],
    image_vocab: usize,
    mode: &DecodeMode,
    top_k: Option<usize>,
    sampler: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<u32> {
    let image_logits = &logits[..image_vocab];
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0usize;
            let mut best_v = T::neg_infinity();
            for (i, &v) in image_logits.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            Ok(best as u32)
        }
        DecodeMode::Temperature { tau, .. } => {
            let sampler = sampler.expect("sampler present in temperature mode");
            let inv_tau = 1.0 / tau;
            let mut scaled: Vec<(usize, f64)> = image_logits
                .iter()
                .enumerate()
                .map(|(i, &v)| (i, v.as_f64() * inv_tau))
                .collect();
            if let Some(k) = top_k {
                let k = k.max(1).min(scaled.len());
                scaled.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                scaled.truncate(k);
            }
            let max = scaled
                .iter()
                .map(|&(_, v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = scaled.iter().map(|&(_, v)| (v - max).exp()).collect();
            let sum: f64 = probs.iter().sum();
            for p in probs.iter_mut() {
                *p /= sum;
            }
            let draw: f64 = sampler.gen();
            let mut acc = 0.0;
            for (idx, &p) in probs.iter().enumerate() {
                acc += p;
                if draw < acc {
                    return Ok(scaled[idx].0 as u32);
                }
            }
            Ok(scaled.last().unwrap().0 as u32)
        }
    }
}

/// The final n tokens of the decoded span, reshaped to the token grid.
pub fn extract_target(span: &[u32], layout: &SequenceLayout) -> Result<TokenGrid> {
    if span.len() != layout.predicted_span_len() {
        return Err(TokenArError::invalid(format!(
            "span length {} does not match layout {}",
            span.len(),
            layout.predicted_span_len()
        )));
    }
    let n = layout.tokens_per_image();
    Ok(TokenGrid {
        cols: layout.grid_cols,
        rows: layout.grid_rows,
        tokens: span[span.len() - n..].to_vec(),
    })
}
