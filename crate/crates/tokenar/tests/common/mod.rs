//! Shared fixtures for the integration suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tokenar::model::ModelConfig;
use tokenar::rng;
use tokenar::sequence::{self, SequenceBundle, SequenceLayout};

/// Model sized for the gradient oracle: 2 layers, d=16, ITD layout with
/// m=2, n=4 (2x2 grid), M=3 instruct tokens.
pub fn oracle_model_config(k: usize, instruct_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        vocab_size: sequence::vocab_size(k),
        image_vocab: k,
        max_seq_len: 128,
        instruct_len,
        index_vocab: 7,
        distill_dim: 6,
        index_embedding_enabled: true,
    }
}

pub fn oracle_layout(instruct_len: usize, itd: bool) -> SequenceLayout {
    SequenceLayout::new(2, 2, 2, instruct_len, itd).unwrap()
}

/// A bundle with random image tokens in every image slot and a valid prompt.
pub fn synthetic_bundle(layout: &SequenceLayout, k: usize, seed: u64) -> SequenceBundle {
    let mut r = rng::stream(seed, 0xB0B);
    let n = layout.tokens_per_image();
    let rand_img = |r: &mut ChaCha8Rng| -> Vec<u32> {
        (0..n).map(|_| r.gen_range(0..k as u32)).collect()
    };
    let ref1 = rand_img(&mut r);
    let ref2 = rand_img(&mut r);
    let bg = rand_img(&mut r);
    let target = rand_img(&mut r);
    let prompt = sequence::encode_prompt(k, r.gen_range(0..16), r.gen_range(0..11), r.gen_range(0..16)).unwrap();

    let mut context_ids = Vec::with_capacity(layout.context_len());
    context_ids
        .extend(std::iter::repeat(sequence::placeholder_id(k)).take(layout.instruct_len));
    context_ids.extend_from_slice(&prompt);
    context_ids.extend_from_slice(&ref1);
    context_ids.extend_from_slice(&ref2);
    context_ids.extend_from_slice(&bg);

    let mut target_ids = Vec::with_capacity(layout.predicted_span_len());
    if layout.itd_enabled {
        target_ids.extend_from_slice(&ref1);
        target_ids.extend_from_slice(&ref2);
    }
    target_ids.extend_from_slice(&target);

    let total = layout.total_len();
    SequenceBundle {
        context_ids,
        target_ids,
        index_ids: (0..total).map(|p| layout.index_id_for_position(p)).collect(),
        position_ids: (0..total as u32).collect(),
        loss_mask: vec![true; layout.predicted_span_len()],
        instruct_len: layout.instruct_len,
        layout: *layout,
    }
}
