//! Analytic parameter, FLOP and activation accounting, plus a small forward
//! timing harness.
//!
//! FLOPs are counted as multiply-adds of the matrix products (projections,
//! MLP, attention scores, attention-weighted values, output head).
//! Elementwise work (layer norm, GELU, pooling, fusion) is not counted.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, CInit, ForwardOptions, Mode, ModelConfig, ModelParams, TokenBatch};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Token and position tables.
    pub embeddings: u64,
    pub encoder: u64,
    /// Predictor blocks, its final norm and a learned `c_init`.
    pub predictor: u64,
    pub decoder: u64,
    /// Final norm plus the output projection when it is not tied.
    pub head: u64,
    pub total: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    pub encoder: u64,
    pub predictor: u64,
    pub decoder: u64,
    pub head: u64,
    pub total: u64,
}

/// The `QKᵀ` score products alone: `B·T²·d` per backbone layer and
/// `B·K′²·d` per predictor layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionTerm {
    pub backbone: u64,
    pub predictor: u64,
}

/// ContextLM extra cost relative to the matched-depth baseline. All zero in
/// baseline mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// `K′²/T²`: one predictor layer's score term over one backbone layer's.
    /// Equals `1/w²` when `w` divides `T`.
    pub attention_term_per_layer: f64,
    /// Predictor score term over the whole backbone score term.
    pub attention_term: f64,
    /// Predictor forward FLOPs over baseline forward FLOPs, linear layers
    /// included.
    pub full_model: f64,
    pub params: f64,
    /// Context-embedding activations (`K′·d`) over token-embedding
    /// activations (`T·d`).
    pub context_memory: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: Mode,
    pub batch: usize,
    pub seq_len: usize,
    pub chunk_size: Option<usize>,
    /// Predictor sequence length `K′ = ⌊T/w⌋` (0 in baseline mode).
    pub context_slots: usize,
    pub params: ParamCounts,
    pub flops: FlopCounts,
    pub attention_term: AttentionTerm,
    pub overhead: Overhead,
}

fn block_params(d: u64) -> u64 {
    // 4 attention projections, fc + proj, two norms, MLP biases.
    12 * d * d + 2 * 2 * d + 4 * d + d
}

/// Exact parameter counts; they equal the instantiated tensor sizes.
pub fn count_params(config: &ModelConfig) -> ParamCounts {
    let d = config.d_model as u64;
    let v = config.vocab_size as u64;
    let embeddings = v * d + config.max_seq_len as u64 * d;
    let encoder = config.n_enc_layers as u64 * block_params(d);
    let decoder = config.n_dec_layers as u64 * block_params(d);
    let ctx = config.effective_ctx_layers() as u64;
    let mut predictor = ctx * block_params(d);
    if ctx > 0 {
        predictor += 2 * d;
    }
    if config.is_contextlm() && config.c_init == CInit::Learned {
        predictor += d;
    }
    let head = 2 * d + if config.tie_embeddings { 0 } else { d * v };
    ParamCounts {
        embeddings,
        encoder,
        predictor,
        decoder,
        head,
        total: embeddings + encoder + predictor + decoder + head,
    }
}

/// One block at batch `b`, sequence length `t`: projections and MLP
/// (`12·b·t·d²`) plus scores and weighted values (`2·b·t²·d`).
fn block_flops(b: u64, t: u64, d: u64) -> u64 {
    12 * b * t * d * d + 2 * b * t * t * d
}

/// Predictor sequence length for a `seq_len` input.
pub fn context_slots(config: &ModelConfig, seq_len: usize) -> usize {
    if config.is_contextlm() {
        seq_len / config.chunk_size
    } else {
        0
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Forward cost at batch `batch` and length `seq_len`.
pub fn estimate_flops(config: &ModelConfig, seq_len: usize, batch: usize) -> Result<CostReport> {
    config.validate()?;
    if seq_len == 0 || seq_len > config.max_seq_len {
        return Err(Error::Contract(format!(
            "seq_len {seq_len} outside [1, max_seq_len = {}]",
            config.max_seq_len
        )));
    }
    let (b, t, d) = (batch as u64, seq_len as u64, config.d_model as u64);
    let k = context_slots(config, seq_len) as u64;
    let ctx = config.effective_ctx_layers() as u64;
    let encoder = config.n_enc_layers as u64 * block_flops(b, t, d);
    let decoder = config.n_dec_layers as u64 * block_flops(b, t, d);
    let predictor = ctx * block_flops(b, k, d);
    let head = b * t * d * config.vocab_size as u64;
    let flops = FlopCounts {
        encoder,
        predictor,
        decoder,
        head,
        total: encoder + predictor + decoder + head,
    };
    let attention_term = AttentionTerm {
        backbone: config.backbone_layers() as u64 * b * t * t * d,
        predictor: ctx * b * k * k * d,
    };
    let params = count_params(config);
    let overhead = if config.is_contextlm() {
        Overhead {
            attention_term_per_layer: ratio(k * k, t * t),
            attention_term: ratio(attention_term.predictor, attention_term.backbone),
            full_model: ratio(flops.predictor, flops.total - flops.predictor),
            params: ratio(params.predictor, params.total - params.predictor),
            context_memory: ratio(k, t),
        }
    } else {
        Overhead::default()
    };
    Ok(CostReport {
        mode: config.mode,
        batch,
        seq_len,
        chunk_size: config.is_contextlm().then_some(config.chunk_size),
        context_slots: k as usize,
        params,
        flops,
        attention_term,
        overhead,
    })
}

/// Measured forward wall-clock for a config and its matched baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTiming {
    pub batch: usize,
    pub reps: usize,
    /// Median milliseconds per forward pass.
    pub baseline_ms: f64,
    pub contextlm_ms: f64,
    pub overhead: f64,
    /// Floats held by the forward tape (activations and attention weights).
    pub baseline_activations: u64,
    pub contextlm_activations: u64,
    pub activation_overhead: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub cost: CostReport,
    /// The baseline with the same backbone and head.
    pub baseline: CostReport,
    pub timing: Option<ForwardTiming>,
}

/// The same backbone with the context pathway removed.
pub fn matched_baseline(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        mode: Mode::Baseline,
        ..config.clone()
    }
}

/// Analytic overhead at batch 1. `timing = Some((batch, reps))` adds a
/// measured forward comparison.
pub fn overhead_report(config: &ModelConfig, seq_len: usize, timing: Option<(usize, usize)>) -> Result<OverheadReport> {
    let cost = estimate_flops(config, seq_len, 1)?;
    let baseline = estimate_flops(&matched_baseline(config), seq_len, 1)?;
    let timing = match timing {
        Some((batch, reps)) if config.is_contextlm() => Some(time_forward(config, seq_len, batch, reps)?),
        _ => None,
    };
    Ok(OverheadReport { cost, baseline, timing })
}

fn forward_once(params: &ModelParams<f32>, tokens: &TokenBatch) -> Result<(f64, u64)> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    forward(&mut tape, params, &bound, tokens, ForwardOptions::default())?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((ms, tape.activation_floats() as u64))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// f32 forward passes on a fixed token batch, baseline and ContextLM
/// interleaved so drift affects both equally.
pub fn time_forward(config: &ModelConfig, seq_len: usize, batch: usize, reps: usize) -> Result<ForwardTiming> {
    if batch == 0 || reps == 0 {
        return Err(Error::Contract("timing needs batch >= 1 and reps >= 1".into()));
    }
    let ctx = ModelParams::<f32>::init(config)?;
    let base = ModelParams::<f32>::init(&matched_baseline(config))?;
    let ids = (0..batch * seq_len).map(|i| (i * 7919) % config.vocab_size).collect();
    let tokens = TokenBatch::new(ids, batch, seq_len)?;
    let (mut tb, mut tc) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    let (mut ab, mut ac) = (0, 0);
    // One untimed pass each to warm allocator and caches.
    forward_once(&base, &tokens)?;
    forward_once(&ctx, &tokens)?;
    for _ in 0..reps {
        let (ms, a) = forward_once(&base, &tokens)?;
        tb.push(ms);
        ab = a;
        let (ms, a) = forward_once(&ctx, &tokens)?;
        tc.push(ms);
        ac = a;
    }
    let (baseline_ms, contextlm_ms) = (median(tb), median(tc));
    Ok(ForwardTiming {
        batch,
        reps,
        baseline_ms,
        contextlm_ms,
        overhead: contextlm_ms / baseline_ms - 1.0,
        baseline_activations: ab,
        contextlm_activations: ac,
        activation_overhead: ratio(ac, ab) - 1.0,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

impl fmt::Display for OverheadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.cost;
        match c.chunk_size {
            Some(w) => writeln!(f, "contextlm, T = {}, chunk size {w}, K' = {}", c.seq_len, c.context_slots)?,
            None => writeln!(f, "baseline, T = {}", c.seq_len)?,
        }
        writeln!(f, "{:<12}{:>14}{:>18}", "component", "params", "forward FLOPs")?;
        let rows = [
            ("embeddings", c.params.embeddings, 0),
            ("encoder", c.params.encoder, c.flops.encoder),
            ("predictor", c.params.predictor, c.flops.predictor),
            ("decoder", c.params.decoder, c.flops.decoder),
            ("head", c.params.head, c.flops.head),
            ("total", c.params.total, c.flops.total),
        ];
        for (name, p, fl) in rows {
            writeln!(f, "{name:<12}{p:>14}{fl:>18}")?;
        }
        let o = &c.overhead;
        writeln!(f, "attention-score term, one predictor layer vs one backbone layer: {}", pct(o.attention_term_per_layer))?;
        writeln!(f, "attention-score term, all predictor vs all backbone layers:      {}", pct(o.attention_term))?;
        writeln!(f, "full forward FLOPs, predictor vs baseline model:                 {}", pct(o.full_model))?;
        writeln!(f, "parameters, predictor vs baseline model:                         {}", pct(o.params))?;
        writeln!(f, "context-embedding vs token-embedding activations:                {}", pct(o.context_memory))?;
        if let Some(t) = &self.timing {
            writeln!(
                f,
                "measured forward (B = {}, median of {}): baseline {:.1} ms, contextlm {:.1} ms, overhead {}",
                t.batch,
                t.reps,
                t.baseline_ms,
                t.contextlm_ms,
                pct(t.overhead)
            )?;
            writeln!(
                f,
                "forward tape activations: baseline {}, contextlm {}, overhead {}",
                t.baseline_activations,
                t.contextlm_activations,
                pct(t.activation_overhead)
            )?;
        }
        Ok(())
    }
}
