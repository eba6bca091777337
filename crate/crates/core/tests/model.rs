mod common;

use common::{jittered_params, mean_loss, model_gradcheck, random_tensor, random_tokens, rng};
use contextlm::model::{
    broadcast_fuse, build_chunk_layout, forward, grad_pathway_report, logits, pool_contexts, predict_contexts, CInit,
    ChunkLayout, ForwardOptions, Mode, ModelConfig, ModelParams, TokenBatch,
};
use contextlm::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn tiny(enc: usize, dec: usize, w: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: enc,
        n_dec_layers: dec,
        chunk_size: w,
        ..ModelConfig::tiny()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]
    #[test]
    fn layout_segment_sizes_match_formula(t in 2usize..=4096, w in 2usize..=16) {
        prop_assume!(w <= t);
        let layout = build_chunk_layout(t, w).unwrap();
        let k = t / w + 1;
        prop_assert_eq!(layout.num_slots, k);
        let mut expected = vec![w - 1];
        expected.extend(std::iter::repeat(w).take(k - 2));
        expected.push(t + 1 - (k - 1) * w);
        prop_assert_eq!(layout.segment_sizes(), expected);
        prop_assert_eq!(layout.segment_sizes().iter().sum::<usize>(), t);
        for pos in 0..t {
            prop_assert_eq!(layout.slot_of(pos), (pos + 1) / w);
        }
    }
}

#[test]
fn pooling_examples() {
    let layout = build_chunk_layout(4, 2).unwrap();
    let mut tape = Tape::<f64>::new();
    let h = tape.leaf(Tensor::full([4, 3], 2.5), true);
    let c = pool_contexts(&mut tape, h, 1, &layout).unwrap();
    assert_eq!(tape.value(c).data(), &[2.5; 6]);

    let h2 = tape.leaf(Tensor::from_f64([2, 1], &[1.0, 3.0]).unwrap(), true);
    let l2 = build_chunk_layout(2, 2).unwrap();
    let c2 = pool_contexts(&mut tape, h2, 1, &l2).unwrap();
    assert_eq!(tape.value(c2).data(), &[2.0]);

    // T=7, w=4: the trailing partial window [4,7) is not pooled.
    let l3 = build_chunk_layout(7, 4).unwrap();
    let h3 = tape.leaf(random_tensor(&mut rng(1), &[7, 2], 1.0), true);
    let c3 = pool_contexts(&mut tape, h3, 1, &l3).unwrap();
    assert_eq!(tape.value(c3).shape(), &[1, 2]);
}

#[test]
fn pooling_gradient_is_upstream_over_width() {
    let layout = build_chunk_layout(8, 4).unwrap();
    let mut tape = Tape::<f64>::new();
    let h = tape.leaf(random_tensor(&mut rng(2), &[8, 3], 1.0), true);
    let c = pool_contexts(&mut tape, h, 1, &layout).unwrap();
    let probe = random_tensor(&mut rng(3), &[2, 3], 1.0);
    let p = tape.leaf(probe.clone(), false);
    let m = tape.mul(c, p).unwrap();
    let l = tape.sum(m);
    tape.backward(l).unwrap();
    let g = tape.grad(h).unwrap();
    for t in 0..8 {
        for col in 0..3 {
            let expected = probe.row(t / 4)[col] / 4.0;
            assert!((g[t * 3 + col] - expected).abs() < 1e-15);
        }
    }
}

fn predictor_output(config: &ModelConfig, params: &ModelParams<f64>, c: &Tensor<f64>, layout: &ChunkLayout) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let cv = tape.leaf(c.clone(), false);
    let out = predict_contexts(&mut tape, cv, 1, layout, &bound, config, &mut None, &mut Vec::new()).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn predictor_is_causal_over_chunks() {
    let config = tiny(0, 2, 2);
    let params = jittered_params(&config, 4);
    let layout = build_chunk_layout(12, 2).unwrap();
    let chunks = layout.num_chunks();
    let c = random_tensor(&mut rng(5), &[chunks, 8], 1.0);
    let base = predictor_output(&config, &params, &c, &layout);
    for j in 0..chunks {
        let mut c2 = c.clone();
        c2.data_mut()[j * 8] += 0.5;
        let out = predictor_output(&config, &params, &c2, &layout);
        assert_eq!(&out[..j * 8], &base[..j * 8], "perturbing chunk {j}");
        assert_ne!(&out[j * 8..(j + 1) * 8], &base[j * 8..(j + 1) * 8]);
    }
}

#[test]
fn predictor_single_chunk_depends_on_itself_only() {
    let config = tiny(0, 2, 4);
    let params = jittered_params(&config, 6);
    let layout = build_chunk_layout(4, 4).unwrap();
    let c = random_tensor(&mut rng(7), &[1, 8], 1.0);
    let out = predictor_output(&config, &params, &c, &layout);
    assert_eq!(out.len(), 8);
    assert!(out.iter().all(|x| x.is_finite()));
}

#[test]
fn broadcast_fuse_examples() {
    // T=8, w=4: positions 0..2 take the init slot, 3..6 take ĉ₁, 7 takes ĉ₂.
    let layout = build_chunk_layout(8, 4).unwrap();
    let mut tape = Tape::<f64>::new();
    let direct = tape.leaf(Tensor::zeros([8, 1]), false);
    let init = tape.leaf(Tensor::from_f64([1, 1], &[9.0]).unwrap(), false);
    let ch = tape.leaf(Tensor::from_f64([2, 1], &[1.0, 2.0]).unwrap(), false);
    let (fused, _) = broadcast_fuse(&mut tape, direct, init, Some(ch), 1, &layout).unwrap();
    assert_eq!(tape.value(fused).data(), &[9.0, 9.0, 9.0, 1.0, 1.0, 1.0, 1.0, 2.0]);

    // T=7, w=4: only ĉ₁ exists; the last segment [3,7) takes it.
    let layout = build_chunk_layout(7, 4).unwrap();
    let direct = tape.leaf(Tensor::full([7, 1], 0.5), false);
    let ch = tape.leaf(Tensor::from_f64([1, 1], &[1.0]).unwrap(), false);
    let (fused, _) = broadcast_fuse(&mut tape, direct, init, Some(ch), 1, &layout).unwrap();
    assert_eq!(tape.value(fused).data(), &[9.5, 9.5, 9.5, 1.5, 1.5, 1.5, 1.5]);
}

#[test]
fn broadcast_fuse_batches_use_their_own_rows() {
    let layout = build_chunk_layout(4, 2).unwrap();
    let mut tape = Tape::<f64>::new();
    let direct = tape.leaf(Tensor::zeros([8, 1]), false);
    let init = tape.leaf(Tensor::from_f64([2, 1], &[10.0, 20.0]).unwrap(), false);
    let ch = tape.leaf(Tensor::from_f64([4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let (fused, _) = broadcast_fuse(&mut tape, direct, init, Some(ch), 2, &layout).unwrap();
    assert_eq!(tape.value(fused).data(), &[10.0, 1.0, 1.0, 2.0, 20.0, 3.0, 3.0, 4.0]);
}

fn random_contextlm_config(r: &mut impl Rng) -> ModelConfig {
    let enc = r.gen_range(0..=2);
    ModelConfig {
        vocab_size: r.gen_range(4..=16),
        d_model: 8,
        n_heads: [1, 2, 4][r.gen_range(0..3)],
        n_enc_layers: enc,
        n_dec_layers: r.gen_range(1..=2),
        n_ctx_layers: r.gen_range(1..=2),
        chunk_size: r.gen_range(2..=5),
        max_seq_len: 16,
        c_init: if r.gen_bool(0.5) { CInit::FirstToken } else { CInit::Learned },
        seed: r.gen(),
        ..ModelConfig::default()
    }
}

#[test]
fn forward_causality_fuzz() {
    let mut r = rng(11);
    for trial in 0..60 {
        let config = random_contextlm_config(&mut r);
        let params = jittered_params(&config, trial);
        let seq = r.gen_range(2..=16);
        let tokens = random_tokens(&mut r, config.vocab_size, 1, seq);
        let p = r.gen_range(0..seq);
        let mut perturbed = tokens.clone();
        perturbed.ids[p] = (perturbed.ids[p] + 1 + r.gen_range(0..config.vocab_size - 1)) % config.vocab_size;
        let a = logits(&params, &tokens).unwrap();
        let b = logits(&params, &perturbed).unwrap();
        let v = config.vocab_size;
        assert_eq!(&a.data()[..p * v], &b.data()[..p * v], "trial {trial} {config:?} T={seq} p={p}");
        assert_ne!(&a.data()[p * v..], &b.data()[p * v..]);
    }
}

fn zero_fusion_logits(params: &ModelParams<f64>, tokens: &TokenBatch) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let opts = ForwardOptions {
        zero_fusion: true,
        ..Default::default()
    };
    let trace = forward(&mut tape, params, &bound, tokens, opts).unwrap();
    tape.value(trace.logits).clone()
}

#[test]
fn zero_fusion_matches_baseline() {
    let mut r = rng(12);
    for trial in 0..10 {
        let config = random_contextlm_config(&mut r);
        let params = jittered_params(&config, 100 + trial);
        let baseline = ModelConfig {
            mode: Mode::Baseline,
            ..config.clone()
        };
        let base_params = params.transplant(&baseline).unwrap();
        let tokens = random_tokens(&mut r, config.vocab_size, 2, 12);
        let a = zero_fusion_logits(&params, &tokens);
        let b = logits(&base_params, &tokens).unwrap();
        let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "trial {trial}: {err}");
    }
}

#[test]
fn zero_fusion_matches_baseline_f32() {
    let config = tiny(1, 2, 4);
    let params = jittered_params(&config, 13).cast::<f32>();
    let baseline = ModelConfig {
        mode: Mode::Baseline,
        ..config.clone()
    };
    let base_params = params.transplant(&baseline).unwrap();
    let tokens = random_tokens(&mut rng(14), config.vocab_size, 1, 16);
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(
        &mut tape,
        &params,
        &bound,
        &tokens,
        ForwardOptions {
            zero_fusion: true,
            ..Default::default()
        },
    )
    .unwrap();
    let b = logits(&base_params, &tokens).unwrap();
    for (x, y) in tape.value(trace.logits).data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn fusion_changes_logits_after_first_chunk() {
    let config = tiny(0, 2, 4);
    let params = jittered_params(&config, 15);
    let tokens = random_tokens(&mut rng(16), config.vocab_size, 1, 8);
    let a = logits(&params, &tokens).unwrap();
    let b = zero_fusion_logits(&params, &tokens);
    assert_ne!(a.data(), b.data());
}

#[test]
fn full_model_gradcheck_tiny() {
    let config = tiny(0, 2, 4);
    let params = jittered_params(&config, 17);
    let tokens = random_tokens(&mut rng(18), config.vocab_size, 1, 8);
    let targets: Vec<usize> = random_tokens(&mut rng(19), config.vocab_size, 1, 8).ids;
    let (err, name) = model_gradcheck(&params, &tokens, &targets, 1e-3, 1e-7);
    assert!(err < 1e-4, "worst {name}: {err}");
}

#[test]
fn full_model_gradcheck_encoder_and_learned_init() {
    let config = ModelConfig {
        c_init: CInit::Learned,
        n_ctx_layers: 1,
        ..tiny(1, 1, 3)
    };
    let params = jittered_params(&config, 20);
    let tokens = random_tokens(&mut rng(21), config.vocab_size, 2, 7);
    let targets: Vec<usize> = random_tokens(&mut rng(22), config.vocab_size, 2, 7).ids;
    let (err, name) = model_gradcheck(&params, &tokens, &targets, 1e-3, 1e-7);
    assert!(err < 1e-4, "worst {name}: {err}");
}

#[test]
fn pathway_identities_hold() {
    for (i, config) in [tiny(0, 2, 4), tiny(1, 1, 2), ModelConfig { c_init: CInit::Learned, ..tiny(2, 1, 3) }]
        .into_iter()
        .enumerate()
    {
        let params = jittered_params(&config, 30 + i as u64);
        let tokens = random_tokens(&mut rng(40 + i as u64), config.vocab_size, 2, 9);
        let targets = random_tokens(&mut rng(50 + i as u64), config.vocab_size, 2, 9).ids;
        let report = grad_pathway_report(&params, &tokens, &targets).unwrap();
        report.verify(1e-10).unwrap();
        assert!(report.residuals.per_token_causal == 0.0);
        // Both pathways carry signal.
        assert!(report.token_pathway.data().iter().any(|x| *x != 0.0));
        assert!(report.context_pathway.data().iter().any(|x| *x != 0.0));
    }
}

#[test]
fn pathway_baseline_has_no_context_pathway() {
    let config = ModelConfig {
        mode: Mode::Baseline,
        ..tiny(1, 1, 4)
    };
    let params = jittered_params(&config, 60);
    let tokens = random_tokens(&mut rng(61), config.vocab_size, 1, 8);
    let report = grad_pathway_report(&params, &tokens, &tokens.ids).unwrap();
    report.verify(1e-10).unwrap();
    assert!(report.context_pathway.data().iter().all(|x| *x == 0.0));
    assert_eq!(report.chunk_grads.numel(), 0);
}

#[test]
fn forward_rejects_bad_inputs() {
    let config = tiny(0, 2, 4);
    let params = ModelParams::<f64>::init(&config).unwrap();
    let long = TokenBatch::single(&vec![0; config.max_seq_len + 1]).unwrap();
    assert!(logits(&params, &long).is_err());
    let oov = TokenBatch::single(&[config.vocab_size]).unwrap();
    assert!(logits(&params, &oov).is_err());
}

#[test]
fn short_sequences_use_only_the_init_slot() {
    // T < w: no complete window, every position reads slot 0.
    let config = tiny(0, 2, 4);
    let params = jittered_params(&config, 62);
    let tokens = TokenBatch::single(&[1, 2, 3]).unwrap();
    let out = logits(&params, &tokens).unwrap();
    assert!(out.is_finite());
    assert!(mean_loss(&params, &tokens, &[2, 3, 4]).is_finite());
}
