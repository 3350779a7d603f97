//! Token sequence layout and construction.
//!
//! One training or inference sequence is laid out as
//! `[instruct | prompt | ref_1 .. ref_m | background | predicted span]`,
//! where the predicted span re-emits all m references before the target when
//! identity-token disentanglement is enabled, and is the target alone
//! otherwise. Every token carries a source-index id so the model can add a
//! shared per-source embedding on top of its token embedding.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenArError};
use crate::mat::Mat;
use crate::scalar::Real;
use crate::scene::{SceneSample, CLASS_NAMES, RELATION_NAMES};
use crate::tokenizer::{quantize, Codebook};

/// Maximum number of reference subjects a layout may carry.
pub const MAX_SUBJECTS: usize = 4;

/// Length of an encoded prompt: subject class, relation, subject class.
pub const PROMPT_LEN: usize = 3;

/// Number of non-image vocabulary ids: class names, relation names, and the
/// placeholder id occupying instruct positions.
pub const PROMPT_VOCAB: usize = CLASS_NAMES.len() + RELATION_NAMES.len() + 1;

/// Total model vocabulary for an image-token count of `k`.
pub fn vocab_size(k: usize) -> usize {
    k + PROMPT_VOCAB
}

/// Id filling instruct positions in `context_ids`; never embedded, the model
/// substitutes the learnable instruct vectors at those positions.
pub fn placeholder_id(k: usize) -> u32 {
    (k + CLASS_NAMES.len() + RELATION_NAMES.len()) as u32
}

/// Encodes `(class_a, relation, class_b)` into the reserved prompt-id range
/// above the image tokens.
pub fn encode_prompt(k: usize, class_a: u32, relation_id: u32, class_b: u32) -> Result<Vec<u32>> {
    for class in [class_a, class_b] {
        if class as usize >= CLASS_NAMES.len() {
            return Err(TokenArError::invalid(format!("unknown class id {class}")));
        }
    }
    if relation_id as usize >= RELATION_NAMES.len() {
        return Err(TokenArError::invalid(format!(
            "unknown relation id {relation_id}"
        )));
    }
    let class_base = k as u32;
    let relation_base = (k + CLASS_NAMES.len()) as u32;
    Ok(vec![
        class_base + class_a,
        relation_base + relation_id,
        class_base + class_b,
    ])
}

/// Geometry of one laid-out sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Reference image count m, 1..=4.
    pub m: usize,
    /// Tokens per image n = grid_rows * grid_cols.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Instruct token count M.
    pub instruct_len: usize,
    pub prompt_len: usize,
    pub itd_enabled: bool,
}

impl SequenceLayout {
    pub fn new(
        m: usize,
        grid_rows: usize,
        grid_cols: usize,
        instruct_len: usize,
        itd_enabled: bool,
    ) -> Result<Self> {
        if m == 0 || m > MAX_SUBJECTS {
            return Err(TokenArError::invalid(format!(
                "reference count m must be in 1..={MAX_SUBJECTS}, got {m}"
            )));
        }
        if grid_rows == 0 || grid_cols == 0 {
            return Err(TokenArError::invalid("token grid must be non-empty"));
        }
        Ok(SequenceLayout {
            m,
            grid_rows,
            grid_cols,
            instruct_len,
            prompt_len: PROMPT_LEN,
            itd_enabled,
        })
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn instruct_span(&self) -> Range<usize> {
        0..self.instruct_len
    }

    pub fn prompt_span(&self) -> Range<usize> {
        let s = self.instruct_len;
        s..s + self.prompt_len
    }

    /// Span of reference image r, 1-based.
    pub fn ref_span(&self, r: usize) -> Range<usize> {
        debug_assert!(r >= 1 && r <= self.m);
        let n = self.tokens_per_image();
        let s = self.instruct_len + self.prompt_len + (r - 1) * n;
        s..s + n
    }

    pub fn background_span(&self) -> Range<usize> {
        let n = self.tokens_per_image();
        let s = self.instruct_len + self.prompt_len + self.m * n;
        s..s + n
    }

    /// Conditioning prefix length: instruct + prompt + m references + background.
    pub fn context_len(&self) -> usize {
        self.instruct_len + self.prompt_len + (self.m + 1) * self.tokens_per_image()
    }

    pub fn predicted_span_len(&self) -> usize {
        let n = self.tokens_per_image();
        if self.itd_enabled {
            (self.m + 1) * n
        } else {
            n
        }
    }

    pub fn predicted_span(&self) -> Range<usize> {
        let s = self.context_len();
        s..s + self.predicted_span_len()
    }

    /// Span of the final target image inside the full sequence.
    pub fn target_span(&self) -> Range<usize> {
        let e = self.total_len();
        e - self.tokens_per_image()..e
    }

    pub fn total_len(&self) -> usize {
        self.context_len() + self.predicted_span_len()
    }

    /// Rows of the image-token context (all references plus background).
    pub fn image_context_span(&self) -> Range<usize> {
        let s = self.instruct_len + self.prompt_len;
        s..self.context_len()
    }

    /// Source-index id for an absolute position: 0 for instruct/prompt,
    /// 1..=m for reference r (both the conditioning copy and the re-emitted
    /// copy), m+1 for the background, m+2 for the target image.
    pub fn index_id_for_position(&self, pos: usize) -> u16 {
        let n = self.tokens_per_image();
        let image_start = self.instruct_len + self.prompt_len;
        if pos < image_start {
            return 0;
        }
        if pos < self.context_len() {
            let img = (pos - image_start) / n;
            return (img + 1) as u16; // 1..=m references, m+1 background
        }
        let off = pos - self.context_len();
        if self.itd_enabled && off < self.m * n {
            return (off / n + 1) as u16;
        }
        (self.m + 2) as u16
    }

    /// Index vocabulary needed for this layout.
    pub fn index_vocab_required(&self) -> usize {
        self.m + 3
    }
}

/// A fully laid-out sequence ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    /// Conditioning prefix ids; instruct positions hold the placeholder id.
    pub context_ids: Vec<u32>,
    /// Ids the model must predict, covering the predicted span.
    pub target_ids: Vec<u32>,
    /// Per-token source-index id over the full sequence.
    pub index_ids: Vec<u16>,
    /// Absolute positions over the full sequence.
    pub position_ids: Vec<u32>,
    /// Which predicted positions contribute to the loss.
    pub loss_mask: Vec<bool>,
    pub instruct_len: usize,
    pub layout: SequenceLayout,
}

impl SequenceBundle {
    pub fn total_len(&self) -> usize {
        self.context_ids.len() + self.target_ids.len()
    }

    /// Context and predicted ids concatenated.
    pub fn full_ids(&self) -> Vec<u32> {
        let mut ids = self.context_ids.clone();
        ids.extend_from_slice(&self.target_ids);
        ids
    }
}

/// Lays out a training sequence for one scene sample.
pub fn build_training_sequence(
    sample: &SceneSample,
    layout: &SequenceLayout,
    codebook: &Codebook,
    patch: usize,
) -> Result<SequenceBundle> {
    if layout.m != sample.ref_images.len() {
        return Err(TokenArError::invalid(format!(
            "layout expects {} references, sample has {}",
            layout.m,
            sample.ref_images.len()
        )));
    }
    if sample.prompt.len() != layout.prompt_len {
        return Err(TokenArError::invalid(format!(
            "prompt length {} does not match layout {}",
            sample.prompt.len(),
            layout.prompt_len
        )));
    }
    let n = layout.tokens_per_image();
    let mut ref_tokens = Vec::with_capacity(layout.m);
    for img in &sample.ref_images {
        let grid = quantize(img, codebook, patch)?;
        check_grid(&grid, layout)?;
        ref_tokens.push(grid.tokens);
    }
    let bg = quantize(&sample.background, codebook, patch)?;
    check_grid(&bg, layout)?;
    let target = quantize(&sample.target, codebook, patch)?;
    check_grid(&target, layout)?;

    let mut context_ids = Vec::with_capacity(layout.context_len());
    context_ids.extend(std::iter::repeat(placeholder_id(codebook.entries.len())).take(layout.instruct_len));
    context_ids.extend_from_slice(&sample.prompt);
    for toks in &ref_tokens {
        context_ids.extend_from_slice(toks);
    }
    context_ids.extend_from_slice(&bg.tokens);
    debug_assert_eq!(context_ids.len(), layout.context_len());

    let mut target_ids = Vec::with_capacity(layout.predicted_span_len());
    if layout.itd_enabled {
        for toks in &ref_tokens {
            target_ids.extend_from_slice(toks);
        }
    }
    target_ids.extend_from_slice(&target.tokens);
    debug_assert_eq!(target_ids.len(), layout.predicted_span_len());

    let total = layout.total_len();
    let index_ids: Vec<u16> = (0..total).map(|p| layout.index_id_for_position(p)).collect();
    let position_ids: Vec<u32> = (0..total as u32).collect();
    let loss_mask = vec![true; layout.predicted_span_len()];
    debug_assert_eq!(
        n * (layout.m + 1),
        ref_tokens.iter().map(|t| t.len()).sum::<usize>() + bg.tokens.len()
    );

    Ok(SequenceBundle {
        context_ids,
        target_ids,
        index_ids,
        position_ids,
        loss_mask,
        instruct_len: layout.instruct_len,
        layout: *layout,
    })
}

fn check_grid(grid: &crate::tokenizer::TokenGrid, layout: &SequenceLayout) -> Result<()> {
    if grid.rows != layout.grid_rows || grid.cols != layout.grid_cols {
        return Err(TokenArError::invalid(format!(
            "token grid {}x{} does not match layout {}x{}",
            grid.rows, grid.cols, layout.grid_rows, layout.grid_cols
        )));
    }
    Ok(())
}

/// Looks up the shared source vector for each token: row `index_ids[i]` of
/// the index table.
pub fn assign_index_embedding<T: Real>(index_ids: &[u16], table: &Mat<T>) -> Result<Mat<T>> {
    let mut out = Mat::zeros(index_ids.len(), table.cols);
    for (i, &id) in index_ids.iter().enumerate() {
        if id as usize >= table.rows {
            return Err(TokenArError::invalid(format!(
                "index id {id} out of range for table of {} rows",
                table.rows
            )));
        }
        out.row_mut(i).copy_from_slice(table.row(id as usize));
    }
    Ok(out)
}
