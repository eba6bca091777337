//! Perplexity, position-bucketed loss, ΔLoss curves and attention export.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{windows, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{forward, ChunkLayout, ForwardOptions, ModelParams, Stack, TokenBatch};
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Scalar, Tape};

/// Windows evaluated per forward pass.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketLoss {
    pub start: usize,
    pub end: usize,
    pub tokens: usize,
    pub mean_nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub seq_len: usize,
    pub windows: usize,
    pub tokens: usize,
    /// Nats per token.
    pub mean_nll: f64,
    pub perplexity: f64,
    pub buckets: Vec<BucketLoss>,
    pub wall_ms: u64,
}

/// Per-position NLL over `n` non-overlapping windows of `seq_len + 1` bytes
/// from the start of `bytes`. Row `i` of the result is window `i`.
pub fn window_nll<T: Scalar>(params: &ModelParams<T>, bytes: &[u8], seq_len: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    let stride = seq_len + 1;
    let available = bytes.len() / stride;
    if seq_len == 0 || available == 0 || n == 0 {
        return Err(Error::Contract(format!(
            "evaluation needs at least one window of {stride} bytes, split has {}",
            bytes.len()
        )));
    }
    let n = n.min(available);
    let v = params.config().vocab_size;
    let starts: Vec<usize> = (0..n).map(|i| i * stride).collect();
    let mut out = Vec::with_capacity(n);
    for group in starts.chunks(EVAL_BATCH) {
        let (inputs, targets) = windows(bytes, group, seq_len);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let trace = forward(&mut tape, params, &bound, &inputs, ForwardOptions::default())?;
        let logits = tape.value(trace.logits);
        for b in 0..group.len() {
            let row: Vec<f64> = (0..seq_len)
                .map(|t| {
                    let r = b * seq_len + t;
                    let z: Vec<f64> = logits.data()[r * v..(r + 1) * v].iter().map(|x| x.as_f64()).collect();
                    log_sum_exp(&z) - z[targets[r]]
                })
                .collect();
            out.push(row);
        }
    }
    Ok(out)
}

/// Checks that `buckets` are non-empty, contiguous and cover `[0, seq_len)`.
pub fn check_partition(buckets: &[Range<usize>], seq_len: usize) -> Result<()> {
    let mut next = 0;
    for b in buckets {
        if b.is_empty() {
            return Err(Error::Contract(format!("empty bucket {b:?}")));
        }
        if b.start != next {
            return Err(Error::Contract(format!(
                "buckets must partition [0, {seq_len}): {b:?} does not start at {next}"
            )));
        }
        next = b.end;
    }
    if next != seq_len {
        return Err(Error::Contract(format!("buckets end at {next}, not {seq_len}")));
    }
    Ok(())
}

/// `n` near-equal contiguous buckets over `[0, seq_len)`.
pub fn even_buckets(seq_len: usize, n: usize) -> Vec<Range<usize>> {
    let n = n.clamp(1, seq_len.max(1));
    (0..n).map(|i| i * seq_len / n..(i + 1) * seq_len / n).collect()
}

pub fn bucketed_position_loss<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    n_windows: usize,
    buckets: &[Range<usize>],
) -> Result<EvalReport> {
    check_partition(buckets, seq_len)?;
    let start = Instant::now();
    let nll = window_nll(params, corpus.split(split), seq_len, n_windows)?;
    let windows = nll.len();
    let total: f64 = nll.iter().flatten().sum();
    let tokens = windows * seq_len;
    let mean_nll = total / tokens as f64;
    let buckets = buckets
        .iter()
        .map(|r| {
            let sum: f64 = nll.iter().map(|row| row[r.clone()].iter().sum::<f64>()).sum();
            let n = r.len() * windows;
            BucketLoss {
                start: r.start,
                end: r.end,
                tokens: n,
                mean_nll: sum / n as f64,
            }
        })
        .collect();
    Ok(EvalReport {
        split: split.name().to_string(),
        seq_len,
        windows,
        tokens,
        mean_nll,
        perplexity: mean_nll.exp(),
        buckets,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Mean NLL and perplexity over deterministic non-overlapping windows.
pub fn perplexity<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    n_windows: usize,
) -> Result<EvalReport> {
    bucketed_position_loss(params, corpus, split, seq_len, n_windows, &[0..seq_len])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaBucket {
    pub start: usize,
    pub end: usize,
    pub delta_nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaCurve {
    pub label_a: String,
    pub label_b: String,
    pub seq_len: usize,
    /// `a − b` per bucket.
    pub buckets: Vec<DeltaBucket>,
}

pub fn delta_loss_curve(a: &EvalReport, b: &EvalReport, label_a: &str, label_b: &str) -> Result<DeltaCurve> {
    let same = a.seq_len == b.seq_len
        && a.buckets.len() == b.buckets.len()
        && a.buckets.iter().zip(&b.buckets).all(|(x, y)| (x.start, x.end) == (y.start, y.end));
    if !same {
        return Err(Error::Contract(format!(
            "bucket mismatch between `{label_a}` and `{label_b}` reports"
        )));
    }
    Ok(DeltaCurve {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        seq_len: a.seq_len,
        buckets: a
            .buckets
            .iter()
            .zip(&b.buckets)
            .map(|(x, y)| DeltaBucket {
                start: x.start,
                end: x.end,
                delta_nll: x.mean_nll - y.mean_nll,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptToken {
    pub id: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub stack: Stack,
    /// Index within the stack.
    pub layer: usize,
    /// Index over encoder then decoder layers.
    pub backbone_layer: usize,
    pub head: usize,
    /// `weights[i][j]`: attention of query `i` on key `j`.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionDump {
    pub tokens: Vec<PromptToken>,
    pub chunk_size: Option<usize>,
    pub layout: Option<ChunkLayout>,
    pub matrices: Vec<AttentionMatrix>,
    /// Mean over heads of the column sums at the final backbone layer.
    pub aggregated: Vec<f64>,
    pub aggregated_layer: usize,
}

fn token_text(id: usize) -> String {
    match u8::try_from(id) {
        Ok(b) if b.is_ascii_graphic() || b == b' ' => (b as char).to_string(),
        Ok(b) => format!("\\x{b:02x}"),
        Err(_) => format!("<{id}>"),
    }
}

/// Backbone attention for one prompt. `layers`/`heads` select what is
/// exported (all when `None`); the aggregate always uses every head of the
/// final backbone layer.
pub fn attention_dump<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[usize],
    layers: Option<&[usize]>,
    heads: Option<&[usize]>,
) -> Result<AttentionDump> {
    let config = params.config();
    let n_layers = config.backbone_layers();
    for &l in layers.unwrap_or(&[]) {
        if l >= n_layers {
            return Err(Error::Index {
                op: "export_attention layer",
                index: l,
                bound: n_layers,
            });
        }
    }
    for &h in heads.unwrap_or(&[]) {
        if h >= config.n_heads {
            return Err(Error::Index {
                op: "export_attention head",
                index: h,
                bound: config.n_heads,
            });
        }
    }
    let tokens = TokenBatch::single(prompt)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(&mut tape, params, &bound, &tokens, ForwardOptions::default())?;
    let t = prompt.len();
    let backbone: Vec<_> = trace.blocks.iter().filter(|r| r.stack != Stack::Predictor).collect();
    let head_matrix = |probs: &[T], h: usize| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| probs[(h * t + i) * t..(h * t + i + 1) * t].iter().map(|x| x.as_f64()).collect())
            .collect()
    };
    let mut matrices = Vec::new();
    for (bl, rec) in backbone.iter().enumerate() {
        if layers.is_some_and(|ls| !ls.contains(&bl)) {
            continue;
        }
        let (probs, _) = tape.attention_probs(rec.trace.attention).expect("attention node");
        for h in 0..config.n_heads {
            if heads.is_some_and(|hs| !hs.contains(&h)) {
                continue;
            }
            matrices.push(AttentionMatrix {
                stack: rec.stack,
                layer: rec.layer,
                backbone_layer: bl,
                head: h,
                weights: head_matrix(probs, h),
            });
        }
    }
    let last = backbone.last().expect("at least one backbone layer");
    let (probs, _) = tape.attention_probs(last.trace.attention).expect("attention node");
    let mut aggregated = vec![0.0; t];
    for h in 0..config.n_heads {
        for row in head_matrix(probs, h) {
            for (a, w) in aggregated.iter_mut().zip(row) {
                *a += w;
            }
        }
    }
    for a in &mut aggregated {
        *a /= config.n_heads as f64;
    }
    Ok(AttentionDump {
        tokens: prompt.iter().map(|&id| PromptToken { id, text: token_text(id) }).collect(),
        chunk_size: config.is_contextlm().then_some(config.chunk_size),
        layout: trace.layout,
        matrices,
        aggregated,
        aggregated_layer: backbone.len() - 1,
    })
}

pub fn export_attention<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[usize],
    layers: Option<&[usize]>,
    heads: Option<&[usize]>,
    path: &Path,
) -> Result<AttentionDump> {
    let dump = attention_dump(params, prompt, layers, heads)?;
    let json = serde_json::to_vec_pretty(&dump)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(dump)
}
