//! End-to-end flows: scenes to datasets to bundles to training to decoding,
//! plus cross-cutting invariants that span modules.

use tokenar::config::RunConfig;
use tokenar::dataset::{read_dataset, write_dataset, DatasetHeader};
use tokenar::inference::{generate_from_context, GenerateConfig};
use tokenar::mat::Mat;
use tokenar::model::{self, init_params, load_checkpoint, save_checkpoint, LossSpec, ModelParams};
use tokenar::rng;
use tokenar::scene::{random_scene_inputs, SceneBuilder, SceneSample};
use tokenar::sequence::{build_training_sequence, SequenceLayout};
use tokenar::tokenizer::build_codebook;
use tokenar::training::{self, ce_loss, train_loop, TrainConfig};

/// A small but real configuration: full 8x8 scene grid, narrow model.
fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 32;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.distill_dim = 8;
    cfg.layout.instruct_len = 4;
    cfg.training.steps = 3;
    cfg.training.batch_size = 4;
    cfg.validate().unwrap();
    cfg
}

fn make_scenes(count: usize, seed: u64, builder: &SceneBuilder) -> Vec<SceneSample> {
    let mut r = rng::stream(seed, 0x5EED);
    (0..count)
        .map(|i| {
            let (a, b, rel) = random_scene_inputs(&mut r, builder.codebook.entries.len());
            builder.compose_scene(&a, &b, rel, seed * 1000 + i as u64).unwrap()
        })
        .collect()
}

#[test]
fn train_loop_is_bitwise_deterministic() {
    let cfg = small_run_config();
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(4, 3, &builder);
    let layout = cfg.sequence_layout().unwrap();
    let bundles: Vec<_> = scenes
        .iter()
        .map(|s| build_training_sequence(s, &layout, &builder.codebook, 4).unwrap())
        .collect();
    let run = |_: u32| {
        let params = init_params::<f32>(&cfg.model_config().unwrap(), 9).unwrap();
        train_loop(params, &bundles, &cfg.train_config(), None).unwrap()
    };
    let a = run(0);
    let b = run(1);
    for ((_, _, ta), (_, _, tb)) in a.params.tensors().iter().zip(b.params.tensors().iter()) {
        let ba: Vec<u32> = ta.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = tb.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb, "training is not bitwise reproducible");
    }
    for (ma, mb) in a.metrics.iter().zip(b.metrics.iter()) {
        assert_eq!(ma.total.to_bits(), mb.total.to_bits());
    }
}

#[test]
fn checkpoint_round_trip_preserves_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config();
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(2, 5, &builder);
    let layout = cfg.sequence_layout().unwrap();
    let bundles: Vec<_> = scenes
        .iter()
        .map(|s| build_training_sequence(s, &layout, &builder.codebook, 4).unwrap())
        .collect();
    let params = init_params::<f32>(&cfg.model_config().unwrap(), 1).unwrap();
    let result = train_loop(params, &bundles, &cfg.train_config(), None).unwrap();

    let path = dir.path().join("model.tkar");
    save_checkpoint(&path, &result.params).unwrap();
    let restored: ModelParams<f32> = load_checkpoint(&path, &cfg.model_config().unwrap()).unwrap();
    assert_eq!(result.params, restored);

    let g1 = generate_from_context(&result.params, &bundles[0], &GenerateConfig::default()).unwrap();
    let g2 = generate_from_context(&restored, &bundles[0], &GenerateConfig::default()).unwrap();
    assert_eq!(g1.span, g2.span);
}

#[test]
fn zero_steps_leaves_initial_params_as_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config();
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(2, 6, &builder);
    let layout = cfg.sequence_layout().unwrap();
    let bundles: Vec<_> = scenes
        .iter()
        .map(|s| build_training_sequence(s, &layout, &builder.codebook, 4).unwrap())
        .collect();
    let mut tc = cfg.train_config();
    tc.steps = 0;
    let params = init_params::<f32>(&cfg.model_config().unwrap(), 4).unwrap();
    let initial = params.clone();
    let outputs = training::TrainOutputs::new(dir.path()).unwrap();
    let result = train_loop(params, &bundles, &tc, Some(&outputs)).unwrap();
    assert_eq!(result.params, initial);
    assert_eq!(result.metrics.len(), 0);
    let restored: ModelParams<f32> =
        load_checkpoint(&outputs.final_checkpoint(), &cfg.model_config().unwrap()).unwrap();
    assert_eq!(restored, initial);
    // The metrics file exists and has only the header.
    let csv = std::fs::read_to_string(&outputs.metrics_csv).unwrap();
    assert_eq!(csv.trim(), "step,ce,distill,total,lr");
}

#[test]
fn baseline_flags_reduce_to_target_only_training() {
    let mut cfg = small_run_config();
    cfg.layout.itd = false;
    cfg.training.instruct = false;
    cfg.model.index_embedding = false;
    cfg.validate().unwrap();
    let layout = cfg.sequence_layout().unwrap();
    assert_eq!(layout.instruct_len, 0);
    assert_eq!(layout.predicted_span_len(), 64);
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(2, 7, &builder);
    let bundle = build_training_sequence(&scenes[0], &layout, &builder.codebook, 4).unwrap();
    assert_eq!(bundle.target_ids.len(), 64);
    assert_eq!(bundle.loss_mask.len(), 64);
    // And it trains.
    let params = init_params::<f32>(&cfg.model_config().unwrap(), 2).unwrap();
    let mut tc = cfg.train_config();
    tc.steps = 2;
    tc.lambda_distill = 0.0;
    let bundles = vec![bundle];
    let result = train_loop(params, &bundles, &tc, None).unwrap();
    assert!(result.metrics.iter().all(|m| m.total.is_finite()));
}

#[test]
fn batch_ce_is_the_masked_count_weighted_mean_of_per_sample_ce() {
    let cfg = small_run_config();
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(2, 8, &builder);
    let layout = cfg.sequence_layout().unwrap();
    let params = init_params::<f64>(&cfg.model_config().unwrap(), 3).unwrap();

    let mut bundles: Vec<_> = scenes
        .iter()
        .map(|s| build_training_sequence(s, &layout, &builder.codebook, 4).unwrap())
        .collect();
    // Give the second bundle a partial mask so the weights differ.
    for (i, m) in bundles[1].loss_mask.iter_mut().enumerate() {
        *m = i % 3 == 0;
    }

    let mut weighted = 0.0;
    let mut count = 0usize;
    let mut rows = Vec::new();
    for b in &bundles {
        let out = model::forward(&params, b, None).unwrap();
        let (ce, _) = ce_loss(&out.logits, &b.target_ids, &b.loss_mask).unwrap();
        let masked = b.loss_mask.iter().filter(|&&m| m).count();
        weighted += ce * masked as f64;
        count += masked;
        for j in 0..out.logits.rows {
            if b.loss_mask[j] {
                rows.push((out.logits.row(j).to_vec(), b.target_ids[j]));
            }
        }
    }
    let batch_mean = weighted / count as f64;

    // Independent recomputation over the concatenated masked rows.
    let v = cfg.model_config().unwrap().vocab_size;
    let mut flat = Mat::<f64>::zeros(rows.len(), v);
    let mut targets = Vec::new();
    for (i, (row, t)) in rows.iter().enumerate() {
        flat.row_mut(i).copy_from_slice(row);
        targets.push(*t);
    }
    let (all_ce, _) = ce_loss(&flat, &targets, &vec![true; targets.len()]).unwrap();
    assert!(
        (batch_mean - all_ce).abs() < 1e-12,
        "weighted mean {batch_mean} vs concatenated {all_ce}"
    );
}

#[test]
fn adamw_update_is_layout_invariant_elementwise() {
    // Reference implementation over one flat array in shuffled order must
    // match the tensor-structured update exactly.
    let cfg = small_run_config().model_config().unwrap();
    let mut params = init_params::<f64>(&cfg, 10).unwrap();
    let mut grads = ModelParams::<f64>::zeros_like(&cfg);
    let mut r = rng::stream(55, 0);
    for t in grads.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng::next_normal(&mut r) * 0.01;
        }
    }
    let tc = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.05,
        ..TrainConfig::default()
    };

    // Flatten before the update.
    let flat_params: Vec<f64> = params.tensors().iter().flat_map(|(_, _, d)| d.iter().copied().collect::<Vec<_>>()).collect();
    let flat_grads: Vec<f64> = grads.tensors().iter().flat_map(|(_, _, d)| d.iter().copied().collect::<Vec<_>>()).collect();

    let mut opt = training::OptState::new(&cfg);
    training::adamw_step(&mut params, &grads, &mut opt, &tc).unwrap();
    let updated: Vec<f64> = params.tensors().iter().flat_map(|(_, _, d)| d.iter().copied().collect::<Vec<_>>()).collect();

    // Scalar reference applied in reverse coordinate order.
    let mut reference = flat_params.clone();
    let idx: Vec<usize> = (0..reference.len()).rev().collect();
    for &i in &idx {
        let g = flat_grads[i];
        let mut p = reference[i] * (1.0 - tc.lr * tc.weight_decay);
        let m = (1.0 - tc.beta1) * g;
        let v = (1.0 - tc.beta2) * g * g;
        let m_hat = m / (1.0 - tc.beta1);
        let v_hat = v / (1.0 - tc.beta2);
        p -= tc.lr * m_hat / (v_hat.sqrt() + training::ADAM_EPS);
        reference[i] = p;
    }
    for (i, (a, b)) in updated.iter().zip(reference.iter()).enumerate() {
        assert!(
            (a - b).abs() < 1e-15,
            "coordinate {i}: structured {a} vs flat reference {b}"
        );
    }
}

#[test]
fn dataset_written_by_generator_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config();
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(4, 11, &builder);
    let pairs: Vec<_> = scenes
        .into_iter()
        .map(|s| {
            let scores =
                tokenar::scene::subject_similarities(&s, &builder.codebook, 4).unwrap();
            (s, scores)
        })
        .collect();
    let header = DatasetHeader {
        version: 1,
        count: pairs.len(),
        k: 64,
        patch: 4,
        grid_rows: 8,
        grid_cols: 8,
        palette_seed: 0,
        delta: 0.8,
    };
    write_dataset(&pairs, dir.path(), &header).unwrap();
    let (_, loaded) = read_dataset(dir.path()).unwrap();
    let layout = cfg.sequence_layout().unwrap();
    let bundles: Vec<_> = loaded
        .iter()
        .map(|(s, _)| build_training_sequence(s, &layout, &builder.codebook, 4).unwrap())
        .collect();
    let params = init_params::<f32>(&cfg.model_config().unwrap(), 0).unwrap();
    let mut tc = cfg.train_config();
    tc.steps = 1;
    let result = train_loop(params, &bundles, &tc, None).unwrap();
    assert_eq!(result.metrics.len(), 1);
    assert!(result.metrics[0].total.is_finite());
}

#[test]
fn teacher_forced_perfect_model_reproduces_span_greedily() {
    // Hand-build params that deterministically copy: not feasible without
    // training, so instead check the weaker contract that generation output
    // length and id range always hold, even for a random model.
    let cfg = small_run_config();
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(1, 12, &builder);
    let layout = cfg.sequence_layout().unwrap();
    let bundle = build_training_sequence(&scenes[0], &layout, &builder.codebook, 4).unwrap();
    let params = init_params::<f32>(&cfg.model_config().unwrap(), 77).unwrap();
    let g = generate_from_context(&params, &bundle, &GenerateConfig::default()).unwrap();
    assert_eq!(g.span.len(), layout.predicted_span_len());
    assert!(g.span.iter().all(|&t| (t as usize) < cfg.tokenizer.k));
    assert_eq!(g.target.tokens.len(), 64);
}

#[test]
fn ablation_rows_are_deterministic_per_seed_and_variant() {
    let mut cfg = small_run_config();
    cfg.training.steps = 2;
    cfg.training.batch_size = 2;
    let builder = cfg.scene_builder().unwrap();
    let train = make_scenes(2, 21, &builder);
    let eval_set = make_scenes(2, 22, &builder);
    let run = || {
        tokenar::eval::run_ablation::<f32>(
            &cfg,
            &train,
            &eval_set,
            &[tokenar::eval::Variant::Full, tokenar::eval::Variant::Baseline],
            &[0],
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 2, "one row per requested variant");
    for (ra, rb) in a.iter().zip(b.iter()) {
        assert_eq!(ra.variant, rb.variant);
        for (k, ca) in &ra.metrics {
            let cb = &rb.metrics[k];
            assert_eq!(ca.mean.to_bits(), cb.mean.to_bits(), "metric {k} differs");
        }
    }
}

#[test]
fn distill_gradients_flow_through_projection() {
    let cfg = small_run_config();
    let builder = cfg.scene_builder().unwrap();
    let scenes = make_scenes(1, 13, &builder);
    let layout = cfg.sequence_layout().unwrap();
    let bundle = build_training_sequence(&scenes[0], &layout, &builder.codebook, 4).unwrap();
    let params = init_params::<f64>(&cfg.model_config().unwrap(), 5).unwrap();
    let model_cfg = cfg.model_config().unwrap();
    let n = layout.tokens_per_image();
    let target = &bundle.target_ids[bundle.target_ids.len() - n..];
    let teacher = training::teacher_features::<f64>(
        target,
        8,
        8,
        model_cfg.image_vocab,
        model_cfg.distill_dim,
        99,
    )
    .unwrap();
    let spec = LossSpec {
        target_ids: &bundle.target_ids,
        loss_mask: &bundle.loss_mask,
        lambda_distill: 0.5,
        teacher: Some(&teacher),
    };
    let (breakdown, grads) = model::loss_and_gradients(&params, &bundle, &spec).unwrap();
    assert!(breakdown.distill > 0.0);
    assert!(grads.distill_proj.data.iter().any(|&g| g != 0.0));

    // With lambda 0 the projection sees no gradient.
    let spec0 = LossSpec {
        target_ids: &bundle.target_ids,
        loss_mask: &bundle.loss_mask,
        lambda_distill: 0.0,
        teacher: None,
    };
    let (b0, g0) = model::loss_and_gradients(&params, &bundle, &spec0).unwrap();
    assert_eq!(b0.distill, 0.0);
    assert!(g0.distill_proj.data.iter().all(|&g| g == 0.0));
}
