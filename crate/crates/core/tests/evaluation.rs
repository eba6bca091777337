mod common;

use common::rng;
use contextlm::data::{windows, Corpus, Split};
use contextlm::eval::{
    attention_dump, bucketed_position_loss, check_partition, delta_loss_curve, even_buckets, perplexity, window_nll,
};
use contextlm::model::{loss, Mode, ModelConfig, ModelParams};
use contextlm::verify::jittered_params;
use proptest::prelude::*;
use rand::Rng;

fn byte_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_ctx_layers: 1,
        chunk_size: 4,
        max_seq_len: 32,
        mode,
        ..ModelConfig::default()
    }
}

fn random_corpus(seed: u64, len: usize) -> Corpus {
    let mut r = rng(seed);
    Corpus::from_bytes((0..len).map(|_| r.gen()).collect(), 0.1).unwrap()
}

#[test]
fn zero_model_perplexity_is_vocab_size() {
    let corpus = random_corpus(1, 4_000);
    for mode in [Mode::Baseline, Mode::ContextLm] {
        let params = ModelParams::<f64>::zeros(&byte_config(mode)).unwrap();
        let rep = perplexity(&params, &corpus, Split::Val, 16, 8).unwrap();
        assert!((rep.mean_nll - 256f64.ln()).abs() < 1e-12);
        assert!((rep.perplexity - 256.0).abs() < 1e-9, "{}", rep.perplexity);
    }
}

#[test]
fn window_nll_matches_batch_loss() {
    let corpus = random_corpus(2, 3_000);
    let params = jittered_params(&byte_config(Mode::ContextLm), 2).unwrap();
    let seq = 12;
    let nll = window_nll(&params, corpus.split(Split::Train), seq, 5).unwrap();
    let starts: Vec<usize> = (0..5).map(|i| i * (seq + 1)).collect();
    let (inputs, targets) = windows(corpus.split(Split::Train), &starts, seq);
    let mean = loss(&params, &inputs, &targets, None).unwrap();
    let ours: f64 = nll.iter().flatten().sum::<f64>() / (5 * seq) as f64;
    assert!((ours - mean).abs() < 1e-12, "{ours} vs {mean}");
}

#[test]
fn partition_rejects_gaps_overlaps_and_short_cover() {
    assert!(check_partition(&[0..3, 3..8], 8).is_ok());
    assert!(check_partition(&[0..3, 4..8], 8).is_err());
    assert!(check_partition(&[0..4, 3..8], 8).is_err());
    assert!(check_partition(&[0..3, 3..7], 8).is_err());
    assert!(check_partition(&[0..0, 0..8], 8).is_err());
}

#[test]
fn delta_curve_requires_matching_buckets() {
    let corpus = random_corpus(3, 3_000);
    let params = jittered_params(&byte_config(Mode::Baseline), 3).unwrap();
    let a = bucketed_position_loss(&params, &corpus, Split::Val, 16, 4, &even_buckets(16, 4)).unwrap();
    let b = bucketed_position_loss(&params, &corpus, Split::Val, 16, 4, &even_buckets(16, 2)).unwrap();
    assert!(delta_loss_curve(&a, &b, "a", "b").is_err());
}

#[test]
fn attention_rows_are_causal_distributions() {
    let params = jittered_params(&byte_config(Mode::ContextLm), 4).unwrap();
    let prompt: Vec<usize> = b"attention rows".iter().map(|&b| b as usize).collect();
    let dump = attention_dump(&params, &prompt, None, None).unwrap();
    assert_eq!(dump.matrices.len(), 2 * 2);
    for m in &dump.matrices {
        for (i, row) in m.weights.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&w| w == 0.0));
        }
    }
    assert!((dump.aggregated.iter().sum::<f64>() - prompt.len() as f64).abs() < 1e-9);
    assert!(attention_dump(&params, &prompt, Some(&[2]), None).is_err());
    assert!(attention_dump(&params, &prompt, None, Some(&[2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn even_buckets_partition(seq in 1usize..300, n in 1usize..40) {
        let b = even_buckets(seq, n);
        prop_assert!(check_partition(&b, seq).is_ok());
        prop_assert_eq!(b.len(), n.min(seq));
    }

    #[test]
    fn bucket_means_weight_back_to_total(seed in 0u64..1000, n in 1usize..9) {
        let corpus = random_corpus(seed, 2_000);
        let params = jittered_params(&byte_config(Mode::ContextLm), seed).unwrap();
        let rep = bucketed_position_loss(&params, &corpus, Split::Val, 16, 3, &even_buckets(16, n)).unwrap();
        let weighted: f64 = rep.buckets.iter().map(|b| b.mean_nll * b.tokens as f64).sum::<f64>() / rep.tokens as f64;
        prop_assert!((weighted - rep.mean_nll).abs() < 1e-12);
        prop_assert_eq!(rep.buckets.iter().map(|b| b.tokens).sum::<usize>(), rep.tokens);
    }

    #[test]
    fn delta_is_antisymmetric(seed in 0u64..1000) {
        let corpus = random_corpus(seed, 2_000);
        let buckets = even_buckets(16, 4);
        let a = jittered_params(&byte_config(Mode::ContextLm), seed).unwrap();
        let b = jittered_params(&byte_config(Mode::Baseline), seed + 1).unwrap();
        let ra = bucketed_position_loss(&a, &corpus, Split::Val, 16, 3, &buckets).unwrap();
        let rb = bucketed_position_loss(&b, &corpus, Split::Val, 16, 3, &buckets).unwrap();
        let ab = delta_loss_curve(&ra, &rb, "a", "b").unwrap();
        let ba = delta_loss_curve(&rb, &ra, "b", "a").unwrap();
        let aa = delta_loss_curve(&ra, &ra, "a", "a").unwrap();
        for ((x, y), z) in ab.buckets.iter().zip(&ba.buckets).zip(&aa.buckets) {
            prop_assert_eq!(x.delta_nll, -y.delta_nll);
            prop_assert_eq!(z.delta_nll, 0.0);
        }
    }
}
