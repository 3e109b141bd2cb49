use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::GradCheckConfig;
use crate::data::{synth_corpus, Batch, FramePipeline, SynthSpec, Utterance};
use crate::error::Error;
use crate::layers::RouterMode;
use crate::losses::{LossMode, LossWeights};
use crate::params::check_gradients;
use crate::tensor::Tensor;

/// Parameter total from first principles, independent of the layer code.
fn param_oracle(c: &ModelConfig) -> u64 {
    let (d, h, n) = (c.d as u64, c.h_ffn as u64, c.n_experts as u64);
    let expert = d * h + h + h * d + d;
    let memory = 6 * d;
    let attention = 4 * d * d;
    let head = d * c.vocab as u64 + c.vocab as u64;
    let router_in = if c.router_mode == RouterMode::EmbeddingConcat { 2 * d } else { d };
    let router = if n > 1 { router_in * n } else { 0 };
    let blocks = |depth: usize| (depth / c.attention_every) as u64;
    let layers = c.moe_layers as u64;
    let mut total = c.input_dim as u64 * d + layers * (n * expert + router + memory) + blocks(c.moe_layers) * attention + head;
    if c.embedding_depth > 0 {
        total += c.embedding_depth as u64 * (expert + memory) + blocks(c.embedding_depth) * attention + head;
    }
    total
}

fn desk_batch(cfg: &ModelConfig, utterances: usize, seed: u64) -> Batch {
    let corpus = synth_corpus(&SynthSpec {
        utterances,
        dim: cfg.input_dim / 8,
        vocab: cfg.vocab,
        clusters: cfg.vocab - 1,
        seed,
        ..Default::default()
    })
    .unwrap();
    let stacked = FramePipeline::default().apply(&corpus).unwrap();
    Batch::from_utterances(&stacked.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn presets_follow_the_architecture_description() {
    let b1 = ModelConfig::preset("b1").unwrap();
    assert_eq!((b1.n_experts, b1.moe_layers, b1.embedding_depth), (1, 60, 0));
    assert_eq!(b1.attention_blocks(b1.moe_layers), 6);
    let b2 = ModelConfig::preset("b2").unwrap();
    assert_eq!((b2.router_mode, b2.loss_mode, b2.n_experts), (RouterMode::Plain, LossMode::Balancing, 4));
    for (name, n) in [("moe-2e", 2), ("moe-4e", 4), ("moe-8e", 8)] {
        let c = ModelConfig::preset(name).unwrap();
        assert_eq!((c.n_experts, c.moe_layers, c.d, c.h_ffn, c.heads), (n, 30, 512, 1024, 8));
        assert_eq!(c.loss_mode, LossMode::ImportanceL1);
        assert_eq!(c.router_mode, RouterMode::EmbeddingConcat);
    }
    let desk = ModelConfig::preset("desk-moe-4e").unwrap();
    assert_eq!((desk.d, desk.h_ffn, desk.moe_layers, desk.attention_every, desk.vocab), (32, 64, 4, 2, 8));
    assert_eq!(ModelConfig::preset("desk-b1").unwrap().moe_layers, 6);
    assert!(matches!(ModelConfig::preset("moe-16e"), Err(Error::Config(_))));
    for p in PRESETS {
        ModelConfig::preset(p).unwrap().validate().unwrap();
        ModelConfig::preset(&format!("desk-{p}")).unwrap().validate().unwrap();
    }
}

#[test]
fn validation_lists_every_offending_field() {
    let mut c = ModelConfig::preset("desk-moe-4e").unwrap();
    c.heads = 5;
    c.vocab = 1;
    c.embedding_depth = 0;
    let msg = c.validate().unwrap_err().to_string();
    assert!(msg.contains("heads") && msg.contains("vocab") && msg.contains("embedding"), "{msg}");
    assert!(Model::build(c, 0).is_err());
}

#[test]
fn counted_params_match_materialized_model() {
    for p in PRESETS {
        let cfg = ModelConfig::preset(&format!("desk-{p}")).unwrap();
        let model = Model::build(cfg.clone(), 1).unwrap();
        let report = count_params(&cfg).unwrap();
        assert_eq!(report.params, model.params.total_elements() as u64, "{p}");
        assert_eq!(report.params, param_oracle(&cfg), "{p}");
        let parts: u64 = report.components.iter().map(|c| c.params).sum();
        assert_eq!(parts, report.params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut cfg = ModelConfig::preset("desk-moe-4e").unwrap();
        cfg.heads = [1, 2, 4][rng.gen_range(0..3)];
        cfg.d = cfg.heads * rng.gen_range(1..5);
        cfg.h_ffn = rng.gen_range(1..10);
        cfg.n_experts = rng.gen_range(2..5);
        cfg.moe_layers = rng.gen_range(0..5);
        cfg.attention_every = rng.gen_range(1..4);
        cfg.embedding_depth = rng.gen_range(1..3);
        cfg.input_dim = rng.gen_range(1..9);
        let model = Model::build(cfg.clone(), 2).unwrap();
        assert_eq!(count_params(&cfg).unwrap().params, model.params.total_elements() as u64);
        assert_eq!(param_oracle(&cfg), model.params.total_elements() as u64);
    }
}

#[test]
fn full_scale_parameter_totals() {
    for (name, reference) in [("b1", 71e6), ("b2", 134e6), ("moe-2e", 105e6), ("moe-4e", 170e6), ("moe-8e", 297e6)] {
        let cfg = ModelConfig::preset(name).unwrap();
        let got = count_params(&cfg).unwrap().params;
        assert_eq!(got, param_oracle(&cfg));
        assert!((got as f64 / reference - 1.0).abs() <= 0.05, "{name}: {got}");
    }
    let p4 = count_params(&ModelConfig::preset("moe-4e").unwrap()).unwrap().params;
    let p8 = count_params(&ModelConfig::preset("moe-8e").unwrap()).unwrap().params;
    let per_expert = 512 * 1024 + 1024 + 1024 * 512 + 512;
    // four extra experts per layer plus four extra router columns of width 2d
    assert_eq!(p8 - p4, 4 * 30 * per_expert + 30 * 4 * 1024);
}

#[test]
fn flops_are_constant_in_expert_count() {
    let f = |name: &str| count_flops(&ModelConfig::preset(name).unwrap(), 1.0, FlopConvention::Mac1).unwrap();
    let b1 = f("b1").flops;
    for name in ["moe-2e", "moe-4e", "moe-8e"] {
        let x = f(name).flops;
        assert!((x / b1 - 1.0).abs() < 0.01, "{name}: {x} vs {b1}");
        assert!((x / 2.3e9 - 1.0).abs() <= 0.2, "{name}: {x}");
    }
    assert!((f("moe-8e").flops / f("moe-2e").flops - 1.0).abs() < 0.01);
    let emb = f("moe-4e");
    assert_eq!(emb.component("embedding.head").unwrap().flops, 0.0);
}

#[test]
fn flop_algebra() {
    let mut cfg = ModelConfig::preset("desk-moe-4e").unwrap();
    let one = count_flops(&cfg, 1.0, FlopConvention::Mac1).unwrap();
    let two = count_flops(&cfg, 2.0, FlopConvention::Mac1).unwrap();
    // only the attention score/mixing products grow faster than linearly
    let frames = 100.0 / 3.0;
    let blocks = (cfg.attention_blocks(cfg.moe_layers) + cfg.attention_blocks(cfg.embedding_depth)) as f64;
    let quadratic = 4.0 * cfg.d as f64 * blocks * frames * frames;
    assert!((two.flops - 2.0 * one.flops - quadratic).abs() < 1e-6 * one.flops);
    let full = ModelConfig::preset("moe-4e").unwrap();
    let ratio = count_flops(&full, 2.0, FlopConvention::Mac1).unwrap().flops
        / count_flops(&full, 1.0, FlopConvention::Mac1).unwrap().flops;
    assert!(ratio > 2.0 && ratio < 2.01, "{ratio}");
    let mac2 = count_flops(&cfg, 1.0, FlopConvention::Mac2).unwrap();
    assert!((mac2.flops - 2.0 * one.flops).abs() < 1e-6 * one.flops);
    assert!(count_flops(&cfg, 0.0, FlopConvention::Mac1).is_err());

    let deeper = ModelConfig { moe_layers: 5, ..cfg.clone() };
    assert!(count_params(&deeper).unwrap().flops > one.flops);
    let wider = ModelConfig { d: 64, ..cfg.clone() };
    assert!(count_params(&wider).unwrap().flops > one.flops);

    cfg.moe_layers = 0;
    cfg.embedding_depth = 0;
    cfg.router_mode = RouterMode::Plain;
    let bare = count_params(&cfg).unwrap();
    let expected = frames * (cfg.input_dim * cfg.d + cfg.d * cfg.vocab) as f64;
    assert!((bare.flops - expected).abs() < 1e-6);
}

#[test]
fn removing_embedding_network_changes_only_its_share() {
    let with = ModelConfig::preset("moe-l1-emb").unwrap();
    let without = ModelConfig::preset("moe-l1").unwrap();
    let a = count_params(&with).unwrap();
    let b = count_params(&without).unwrap();
    let emb: u64 = a.components.iter().filter(|c| c.name.starts_with("embedding")).map(|c| c.params).sum();
    let router_delta = a.component("backbone.router").unwrap().params - b.component("backbone.router").unwrap().params;
    assert_eq!(a.params - b.params, emb + router_delta);
    for name in ["input", "backbone.ffn", "backbone.memory", "backbone.attention", "output"] {
        assert_eq!(a.component(name).unwrap().flops, b.component(name).unwrap().flops);
    }
}

#[test]
fn forward_shapes_and_records() {
    for preset in ["desk-b1", "desk-b2", "desk-moe-4e"] {
        let cfg = ModelConfig::preset(preset).unwrap();
        let model = Model::build(cfg.clone(), 3).unwrap();
        let batch = desk_batch(&cfg, 3, 4);
        let mut sess = model.session();
        let out = model.forward(&mut sess, &batch).unwrap();
        for (b, &l) in out.logits.iter().enumerate() {
            assert_eq!(sess.value(l).shape(), &[batch.lengths[b], cfg.vocab]);
        }
        assert_eq!(out.routings.len(), cfg.moe_layers);
        let frames: usize = batch.lengths.iter().sum();
        for r in &out.routings {
            assert_eq!(r.record.frames(), frames);
            assert_eq!(r.record.n_experts(), cfg.n_experts);
            if cfg.n_experts == 1 {
                assert!(r.record.gate.iter().all(|&g| g == 1.0));
            }
        }
        assert_eq!(out.embedding_logits.is_empty(), !cfg.has_embedding());
        assert_eq!(sess.expert_frame_evals(), (frames * cfg.moe_layers) as u64);
    }
}

#[test]
fn width_mismatch_is_a_dimension_error() {
    let cfg = ModelConfig::preset("desk-moe-4e").unwrap();
    let model = Model::build(cfg, 0).unwrap();
    let u = Utterance {
        id: "x".into(),
        features: Tensor::zeros(&[3, 5]),
        labels: vec![],
    };
    let batch = Batch::from_utterances(&[&u]).unwrap();
    let mut sess = model.session();
    assert!(matches!(model.forward(&mut sess, &batch), Err(Error::Tensor(_))));
}

#[test]
fn single_expert_model_is_a_static_stack() {
    let cfg = ModelConfig::preset("desk-b1").unwrap();
    let model = Model::build(cfg.clone(), 5).unwrap();
    assert!(model.params.iter().all(|p| !p.name.contains("router")));
    let batch = desk_batch(&cfg, 1, 1);
    let mut sess = model.session();
    let out = model.forward(&mut sess, &batch).unwrap();
    let got = sess.value(out.logits[0]).clone();

    // hand-assembled: o ← o + FFN(o); o ← memory(o); o ← o + attention(o)
    let mut s2 = model.session();
    let x = s2.input(batch.utterance(0));
    let mut o = model.input.forward(&mut s2, x).unwrap();
    for layer in &model.layers {
        let FeedForward::Static(ffn) = &layer.ffn else { panic!("static layer expected") };
        let y = ffn.forward(&mut s2, o).unwrap();
        o = s2.graph.add(o, y).unwrap();
        o = layer.memory.forward(&mut s2, o).unwrap();
        if let Some(att) = &layer.attention {
            let y = att.forward(&mut s2, o).unwrap();
            o = s2.graph.add(o, y).unwrap();
        }
    }
    let logits = model.output.forward(&mut s2, o).unwrap();
    assert_eq!(s2.value(logits), &got);
}

#[test]
fn seeded_build_is_bitwise_reproducible() {
    let cfg = ModelConfig::preset("desk-moe-8e").unwrap();
    let a = Model::build(cfg.clone(), 42).unwrap();
    let b = Model::build(cfg.clone(), 42).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, Model::build(cfg, 43).unwrap().params);
}

#[test]
fn padding_leaves_loss_and_records_unchanged() {
    let cfg = ModelConfig::preset("desk-moe-4e").unwrap();
    let model = Model::build(cfg.clone(), 7).unwrap();
    let corpus = FramePipeline::default()
        .apply(&synth_corpus(&SynthSpec { utterances: 3, seed: 8, ..Default::default() }).unwrap())
        .unwrap();
    let refs: Vec<&Utterance> = corpus.iter().collect();
    let tight = Batch::from_utterances(&refs).unwrap();
    let loose = Batch::padded(&refs, tight.max_frames() + 9).unwrap();
    let w = LossWeights::default();
    let mut s1 = model.session();
    let l1 = model.loss(&mut s1, &tight, &w).unwrap();
    let mut s2 = model.session();
    let l2 = model.loss(&mut s2, &loose, &w).unwrap();
    assert_eq!(l1.breakdown, l2.breakdown);
    for (a, b) in l1.routings.iter().zip(&l2.routings) {
        assert_eq!(a.record, b.record);
    }
}

#[test]
fn infeasible_utterances_are_skipped() {
    let cfg = ModelConfig::preset("desk-moe-2e").unwrap();
    let model = Model::build(cfg.clone(), 7).unwrap();
    let good = Utterance {
        id: "ok".into(),
        features: Tensor::full(&[4, cfg.input_dim], 0.1),
        labels: vec![1, 2],
    };
    let bad = Utterance {
        id: "short".into(),
        features: Tensor::full(&[2, cfg.input_dim], 0.1),
        labels: vec![1, 1],
    };
    let batch = Batch::from_utterances(&[&bad, &good]).unwrap();
    let mut sess = model.session();
    let loss = model.loss(&mut sess, &batch, &LossWeights::default()).unwrap();
    assert_eq!(loss.skipped, vec![0]);
    assert!(loss.breakdown.total.is_finite());
    let only_bad = Batch::from_utterances(&[&bad]).unwrap();
    let mut sess = model.session();
    assert!(model.loss(&mut sess, &only_bad, &LossWeights::default()).is_err());
}

#[test]
fn full_objective_gradient_check() {
    for preset in ["desk-moe-4e", "desk-moe-l1", "desk-b1"] {
        let cfg = ModelConfig::preset(preset).unwrap();
        let mut model = Model::build(cfg.clone(), 9).unwrap();
        // move off the zero-initialized memory coefficients and biases
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for p in model.params.iter_mut() {
            if p.name.contains("memory") || p.name.ends_with("bias") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let batch = desk_batch(&cfg, 2, 12);
        let batch = batch.select(&[0, 1]).unwrap();
        let cfg_check = GradCheckConfig {
            tolerance: 1e-4,
            max_coords: Some(2),
            ..Default::default()
        };
        let w = LossWeights::default();
        let report = check_gradients(
            &model.params,
            &[],
            |sess, _| Ok(model.loss(sess, &batch, &w)?.total),
            &cfg_check,
        )
        .unwrap();
        assert!(report.passed, "{preset}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::preset("desk-moe-4e").unwrap();
    let mut model = Model::build(cfg, 13).unwrap();
    model.params.iter_mut().next().unwrap().value.data_mut()[0] = -0.0;
    let bytes = encode_checkpoint(&model).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.seed, 13);
    for (a, b) in back.params.iter().zip(model.params.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap().params, model.params);
}

#[test]
fn corrupt_checkpoints_report_offsets() {
    let model = Model::build(ModelConfig::preset("desk-moe-2e").unwrap(), 1).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    let mut bad = bytes.clone();
    bad[1] = 0;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    match decode_checkpoint(&bytes[..bytes.len() - 5]) {
        Err(Error::Format { offset, message }) => {
            assert!(offset > 0 && (offset as usize) < bytes.len());
            assert!(message.contains("truncated"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint(&extra), Err(Error::Format { .. })));
}
