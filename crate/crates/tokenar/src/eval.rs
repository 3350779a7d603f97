//! Metrics and analyses: PSNR, token accuracy, identity confusion, attention
//! focus entropy, instruct/prompt attention convergence, and the ablation
//! harness comparing the full method against its reduced variants.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Result, TokenArError};
use crate::inference::{self, DecodeMode, GenerateConfig};
use crate::model::{self, AttentionTrace, ModelParams, TraceSpec};
use crate::scalar::Real;
use crate::scene::{Mask, SceneSample};
use crate::sequence::{build_training_sequence, SequenceLayout};
use crate::tokenizer::{dequantize, quantize, Codebook, ImageGrid, TokenGrid};
use crate::training;

pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB over [0,1] channels; identical inputs
/// cap at 99 dB. The optional mask selects pixels (not channels).
pub fn psnr(a: &ImageGrid, b: &ImageGrid, mask: Option<&[bool]>) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(TokenArError::invalid(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.width * a.height {
            return Err(TokenArError::invalid("mask does not cover the image"));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for p in 0..a.width * a.height {
        if let Some(m) = mask {
            if !m[p] {
                continue;
            }
        }
        for c in 0..3 {
            let d = (a.pixels[p * 3 + c] - b.pixels[p * 3 + c]) as f64;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TokenArError::invalid("psnr over an empty pixel selection"));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Fraction of (masked) positions where the grids agree.
pub fn token_accuracy(pred: &TokenGrid, truth: &TokenGrid, mask: Option<&Mask>) -> Result<f64> {
    if pred.rows != truth.rows || pred.cols != truth.cols {
        return Err(TokenArError::invalid(format!(
            "token grids differ in shape: {}x{} vs {}x{}",
            pred.rows, pred.cols, truth.rows, truth.cols
        )));
    }
    if let Some(m) = mask {
        if m.rows != pred.rows || m.cols != pred.cols {
            return Err(TokenArError::invalid("mask shape does not match grids"));
        }
    }
    let mut hit = 0usize;
    let mut count = 0usize;
    for row in 0..pred.rows {
        for col in 0..pred.cols {
            if let Some(m) = mask {
                if !m.at(row, col) {
                    continue;
                }
            }
            count += 1;
            if pred.at(col, row) == truth.at(col, row) {
                hit += 1;
            }
        }
    }
    if count == 0 {
        return Err(TokenArError::invalid("token_accuracy over an empty mask"));
    }
    Ok(hit as f64 / count as f64)
}

/// Signature cross-contamination: for each subject, the fraction of its mask
/// cells whose predicted token belongs to the other subject's signature.
pub fn identity_confusion(pred: &TokenGrid, sample: &SceneSample) -> Result<f64> {
    let mut rates = [0.0f64; 2];
    for x in 0..2 {
        let own_mask = &sample.masks[x];
        if own_mask.rows != pred.rows || own_mask.cols != pred.cols {
            return Err(TokenArError::invalid(
                "sample masks are not at token resolution",
            ));
        }
        let other_sig = &sample.subjects[1 - x].signature;
        let total = own_mask.count();
        if total == 0 {
            return Err(TokenArError::invalid(format!(
                "subject {x} has an empty mask"
            )));
        }
        let mut contaminated = 0usize;
        for row in 0..pred.rows {
            for col in 0..pred.cols {
                if own_mask.at(row, col) && other_sig.contains(&pred.at(col, row)) {
                    contaminated += 1;
                }
            }
        }
        rates[x] = contaminated as f64 / total as f64;
    }
    Ok((rates[0] + rates[1]) / 2.0)
}

/// Mean Shannon entropy (nats) of the recorded rows at one layer, restricted
/// to the named key span and renormalized.
pub fn attn_focus_entropy(trace: &AttentionTrace, layer: usize, span_name: &str) -> Result<f64> {
    if !trace.has_layer(layer) {
        return Err(TokenArError::invalid(format!(
            "layer {layer} not recorded in trace"
        )));
    }
    let span = trace.key_span(span_name)?;
    let mut sum = 0.0f64;
    let mut rows = 0usize;
    for head in 0..trace.n_heads {
        for (qi, row) in trace.rows[layer][head].iter().enumerate() {
            let qpos = trace.query_position(qi);
            let hi = span.end.min(qpos + 1);
            if span.start >= hi {
                continue;
            }
            let slice = &row[span.start..hi];
            let total: f64 = slice.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let mut h = 0.0f64;
            for &w in slice {
                let p = w / total;
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            sum += h;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(TokenArError::invalid(format!(
            "no recorded rows reach key span {span_name}"
        )));
    }
    Ok(sum / rows as f64)
}

/// L1 distance between the per-query attention-mass profiles over the
/// instruct keys and over the prompt keys, each renormalized over queries;
/// 0 means identical profiles, 2 is maximal.
pub fn attn_prompt_similarity(trace: &AttentionTrace, layer: usize) -> Result<f64> {
    if !trace.has_layer(layer) {
        return Err(TokenArError::invalid(format!(
            "layer {layer} not recorded in trace"
        )));
    }
    let instruct = trace.key_span("instruct")?;
    let prompt = trace.key_span("prompt")?;
    let queries = trace.n_queries();
    if queries == 0 {
        return Err(TokenArError::invalid("trace recorded no query rows"));
    }
    let mut total = 0.0f64;
    for head in 0..trace.n_heads {
        let mut mass_i = vec![0.0f64; queries];
        let mut mass_p = vec![0.0f64; queries];
        for (qi, row) in trace.rows[layer][head].iter().enumerate() {
            let qpos = trace.query_position(qi);
            let take = |span: &std::ops::Range<usize>| -> f64 {
                let hi = span.end.min(qpos + 1);
                if span.start >= hi {
                    0.0
                } else {
                    row[span.start..hi].iter().sum()
                }
            };
            mass_i[qi] = take(&instruct);
            mass_p[qi] = take(&prompt);
        }
        let si: f64 = mass_i.iter().sum();
        let sp: f64 = mass_p.iter().sum();
        if si <= 0.0 || sp <= 0.0 {
            return Err(TokenArError::invalid(
                "a key span received no attention mass",
            ));
        }
        let l1: f64 = mass_i
            .iter()
            .zip(mass_p.iter())
            .map(|(a, b)| (a / si - b / sp).abs())
            .sum();
        total += l1;
    }
    Ok(total / trace.n_heads as f64)
}

/// Writes a trace as CSV rows `layer,head,query,key,weight`.
pub fn export_trace_csv(trace: &AttentionTrace, path: &Path) -> Result<()> {
    let mut s = String::from("layer,head,query,key,weight\n");
    for layer in 0..trace.n_layers {
        for head in 0..trace.n_heads {
            for (qi, row) in trace.rows[layer][head].iter().enumerate() {
                let q = trace.query_position(qi);
                for (k, w) in row.iter().enumerate() {
                    s.push_str(&format!("{layer},{head},{q},{k},{w}\n"));
                }
            }
        }
    }
    fs::write(path, s).map_err(|e| TokenArError::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub psnr_full: f64,
    pub psnr_background: f64,
    pub token_accuracy: f64,
    pub identity_confusion: f64,
    pub eval_ce: f64,
    /// Mean focus entropy of target queries over the image context, per layer.
    pub focus_entropy: Vec<f64>,
    /// Mean instruct/prompt profile divergence per layer; empty without
    /// instruct tokens.
    pub attn_divergence: Vec<f64>,
}

/// Expands a token-resolution mask to pixels.
pub fn mask_to_pixels(mask: &Mask, patch: usize) -> Vec<bool> {
    let w = mask.cols * patch;
    let mut out = vec![false; w * mask.rows * patch];
    for row in 0..mask.rows {
        for col in 0..mask.cols {
            if mask.at(row, col) {
                for y in row * patch..(row + 1) * patch {
                    for x in col * patch..(col + 1) * patch {
                        out[y * w + x] = true;
                    }
                }
            }
        }
    }
    out
}

/// The trace spec used for evaluation: target-position queries over the
/// instruct, prompt, and image-context key spans.
pub fn eval_trace_spec(layout: &SequenceLayout) -> TraceSpec {
    let mut key_spans = vec![
        ("prompt".to_string(), layout.prompt_span()),
        ("image_ctx".to_string(), layout.image_context_span()),
    ];
    if layout.instruct_len > 0 {
        key_spans.insert(0, ("instruct".to_string(), layout.instruct_span()));
    }
    TraceSpec {
        query_span: layout.target_span(),
        key_spans,
    }
}

/// Teacher-forced CE plus greedy-generation metrics over a sample set.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    samples: &[SceneSample],
    layout: &SequenceLayout,
    codebook: &Codebook,
    patch: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(TokenArError::invalid("evaluation set is empty"));
    }
    let n_layers = params.cfg.n_layers;
    let spec = eval_trace_spec(layout);
    let mut acc = EvalAccumulator::new(n_layers, layout.instruct_len > 0);

    for sample in samples {
        let bundle = build_training_sequence(sample, layout, codebook, patch)?;
        let out = model::forward(params, &bundle, Some(&spec))?;
        let (ce, _) = training::ce_loss(&out.logits, &bundle.target_ids, &bundle.loss_mask)?;
        let trace = out.trace.expect("trace requested");

        let generation = inference::generate_from_context(
            params,
            &bundle,
            &GenerateConfig {
                mode: DecodeMode::Greedy,
                top_k: None,
                capture: None,
            },
        )?;
        let truth = quantize(&sample.target, codebook, patch)?;
        let pred_img = dequantize(&generation.target, codebook, patch)?;

        let fg_union = {
            let mut m = sample.masks[0].clone();
            for (dst, &src) in m.cells.iter_mut().zip(sample.masks[1].cells.iter()) {
                *dst = *dst || src;
            }
            m
        };
        let bg_pixels: Vec<bool> = mask_to_pixels(&fg_union, patch)
            .into_iter()
            .map(|b| !b)
            .collect();

        acc.add_sample(
            ce,
            psnr(&pred_img, &sample.target, None)?,
            psnr(&pred_img, &sample.target, Some(&bg_pixels))?,
            token_accuracy(&generation.target, &truth, None)?,
            identity_confusion(&generation.target, sample)?,
            &trace,
        )?;
    }
    acc.finish()
}

struct EvalAccumulator {
    n_layers: usize,
    with_instruct: bool,
    count: usize,
    ce: f64,
    psnr_full: f64,
    psnr_background: f64,
    token_accuracy: f64,
    identity_confusion: f64,
    focus: Vec<f64>,
    divergence: Vec<f64>,
}

impl EvalAccumulator {
    fn new(n_layers: usize, with_instruct: bool) -> Self {
        EvalAccumulator {
            n_layers,
            with_instruct,
            count: 0,
            ce: 0.0,
            psnr_full: 0.0,
            psnr_background: 0.0,
            token_accuracy: 0.0,
            identity_confusion: 0.0,
            focus: vec![0.0; n_layers],
            divergence: vec![0.0; n_layers],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add_sample(
        &mut self,
        ce: f64,
        psnr_full: f64,
        psnr_background: f64,
        accuracy: f64,
        confusion: f64,
        trace: &AttentionTrace,
    ) -> Result<()> {
        self.count += 1;
        self.ce += ce;
        self.psnr_full += psnr_full;
        self.psnr_background += psnr_background;
        self.token_accuracy += accuracy;
        self.identity_confusion += confusion;
        for layer in 0..self.n_layers {
            self.focus[layer] += attn_focus_entropy(trace, layer, "image_ctx")?;
            if self.with_instruct {
                self.divergence[layer] += attn_prompt_similarity(trace, layer)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<EvalReport> {
        let n = self.count as f64;
        Ok(EvalReport {
            sample_count: self.count,
            psnr_full: self.psnr_full / n,
            psnr_background: self.psnr_background / n,
            token_accuracy: self.token_accuracy / n,
            identity_confusion: self.identity_confusion / n,
            eval_ce: self.ce / n,
            focus_entropy: self.focus.iter().map(|v| v / n).collect(),
            attn_divergence: if self.with_instruct {
                self.divergence.iter().map(|v| v / n).collect()
            } else {
                Vec::new()
            },
        })
    }
}

/// Ablation variants from the quantitative comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoInstruct,
    NoItd,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoInstruct,
        Variant::NoItd,
        Variant::Baseline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoInstruct => "no-instruct",
            Variant::NoItd => "no-itd",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no-instruct" => Ok(Variant::NoInstruct),
            "no-itd" => Ok(Variant::NoItd),
            "baseline" => Ok(Variant::Baseline),
            other => Err(TokenArError::invalid(format!(
                "unknown variant {other}; expected full, no-instruct, no-itd, or baseline"
            ))),
        }
    }

    /// Rewrites the run configuration for this variant.
    pub fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Variant::Full => {}
            Variant::NoInstruct => {
                cfg.training.instruct = false;
            }
            Variant::NoItd => {
                cfg.layout.itd = false;
            }
            Variant::Baseline => {
                cfg.training.instruct = false;
                cfg.layout.itd = false;
                cfg.model.index_embedding = false;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AblationCell {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl AblationCell {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        AblationCell {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, AblationCell>,
}

pub const ABLATION_METRICS: [&str; 5] = [
    "psnr_full",
    "psnr_background",
    "token_accuracy",
    "identity_confusion",
    "eval_ce",
];

/// Trains every requested variant under the same budget for each seed and
/// evaluates on the held-out set. Values per metric are summarized as
/// mean/min/max over seeds.
pub fn run_ablation<T: Real>(
    base: &RunConfig,
    train_samples: &[SceneSample],
    eval_samples: &[SceneSample],
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(TokenArError::invalid("ablation needs at least one seed"));
    }
    if variants.is_empty() {
        return Err(TokenArError::invalid("ablation needs at least one variant"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for &seed in seeds {
            let report = train_and_eval_variant::<T>(base, *variant, seed, train_samples, eval_samples)?;
            values.entry("psnr_full").or_default().push(report.psnr_full);
            values
                .entry("psnr_background")
                .or_default()
                .push(report.psnr_background);
            values
                .entry("token_accuracy")
                .or_default()
                .push(report.token_accuracy);
            values
                .entry("identity_confusion")
                .or_default()
                .push(report.identity_confusion);
            values.entry("eval_ce").or_default().push(report.eval_ce);
        }
        let metrics = values
            .into_iter()
            .map(|(k, v)| (k.to_string(), AblationCell::from_values(&v)))
            .collect();
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            seeds: seeds.to_vec(),
            metrics,
        });
    }
    Ok(rows)
}

/// One (variant, seed) training run followed by evaluation.
pub fn train_and_eval_variant<T: Real>(
    base: &RunConfig,
    variant: Variant,
    seed: u64,
    train_samples: &[SceneSample],
    eval_samples: &[SceneSample],
) -> Result<EvalReport> {
    let mut cfg = base.clone();
    variant.apply(&mut cfg);
    cfg.training.seed = seed;
    cfg.validate()?;

    let layout = cfg.sequence_layout()?;
    let model_cfg = cfg.model_config()?;
    let codebook = cfg.codebook()?;
    let bundles: Vec<_> = train_samples
        .iter()
        .map(|s| build_training_sequence(s, &layout, &codebook, cfg.tokenizer.patch))
        .collect::<Result<Vec<_>>>()?;
    let params = model::init_params::<T>(&model_cfg, seed)?;
    let result = training::train_loop(params, &bundles, &cfg.train_config(), None)?;
    evaluate(
        &result.params,
        eval_samples,
        &layout,
        &codebook,
        cfg.tokenizer.patch,
    )
}

/// CSV for the ablation table: one row per variant, mean/min/max per metric.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seeds");
    for m in ABLATION_METRICS {
        s.push_str(&format!(",{m}_mean,{m}_min,{m}_max"));
    }
    s.push('\n');
    for row in rows {
        s.push_str(&row.variant);
        s.push(',');
        s.push_str(
            &row.seeds
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        );
        for m in ABLATION_METRICS {
            let c = &row.metrics[m];
            s.push_str(&format!(",{},{},{}", c.mean, c.min, c.max));
        }
        s.push('\n');
    }
    s
}
