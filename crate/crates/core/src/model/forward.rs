//! Teacher-forced forward pass for both modes.

use serde::{Deserialize, Serialize};

use super::config::{CInit, ModelConfig};
use super::layout::ChunkLayout;
use super::params::{BoundParams, ModelParams};
use crate::error::{Error, Result};
use crate::nn::{self, BlockParams, BlockTrace, Dropout};
use crate::tensor::{Scalar, Tape, Var};

/// Row-major `[batch, seq]` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || seq == 0 || batch == 0 {
            return Err(Error::shape("token_batch", &[batch, seq], &[ids.len()]));
        }
        Ok(Self { ids, batch, seq })
    }

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::new(ids.to_vec(), 1, ids.len())
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Next-token targets within each row; the last slot gets `ignore`.
    pub fn shifted_targets(&self, ignore: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.ids.len());
        for b in 0..self.batch {
            let row = self.row(b);
            out.extend_from_slice(&row[1..]);
            out.push(ignore);
        }
        out
    }
}

/// Switches used by verification paths. All default to off.
#[derive(Default)]
pub struct ForwardOptions {
    /// Skip the fusion addition: the decoder sees `h` alone.
    pub zero_fusion: bool,
    /// Stop gradients into `h` through pooling and the placeholder context.
    pub detach_context_source: bool,
    /// Stop gradients into `h` through the direct `h[t]` term of the fusion.
    pub detach_direct: bool,
    pub dropout: Option<Dropout>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Predictor,
    Decoder,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockRecord {
    pub stack: Stack,
    pub layer: usize,
    pub trace: BlockTrace,
}

/// Named intermediate nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub batch: usize,
    pub seq: usize,
    pub layout: Option<ChunkLayout>,
    /// Encoder output `[batch·seq, d]`.
    pub h: Var,
    /// Pooled contexts `[batch·(K−1), d]`.
    pub c: Option<Var>,
    /// Predicted contexts `ĉ₁..ĉ_{K−1}`, `[batch·(K−1), d]`.
    pub c_hat: Option<Var>,
    /// Broadcast context rows added to `h`, `[batch·seq, d]`.
    pub broadcast: Option<Var>,
    pub fused: Var,
    pub logits: Var,
    pub blocks: Vec<BlockRecord>,
}

fn run_stack<T: Scalar>(
    tape: &mut Tape<T>,
    mut x: Var,
    blocks: &[BlockParams<Var>],
    stack: Stack,
    batch: usize,
    seq: usize,
    n_heads: usize,
    dropout: &mut Option<Dropout>,
    records: &mut Vec<BlockRecord>,
) -> Result<Var> {
    for (layer, p) in blocks.iter().enumerate() {
        let trace = nn::transformer_block(tape, x, p, batch, seq, n_heads, dropout.as_mut())?;
        records.push(BlockRecord { stack, layer, trace });
        x = trace.output;
    }
    Ok(x)
}

fn check_tokens(config: &ModelConfig, tokens: &TokenBatch) -> Result<()> {
    if tokens.seq > config.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.seq, config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            op: "embed",
            index: bad,
            bound: config.vocab_size,
        });
    }
    Ok(())
}

/// Mean-pools `h` over each aligned window of the layout.
pub fn pool_contexts<T: Scalar>(tape: &mut Tape<T>, h: Var, batch: usize, layout: &ChunkLayout) -> Result<Var> {
    tape.mean_pool(h, batch, layout.seq_len, layout.chunk_size, layout.num_chunks())
}

/// Causal predictor over the pooled sequence: slot `j` of the output is
/// `ĉ_{j+1}`, a function of `c₀..c_j` only. Each pooled context gets the
/// position embedding of its window's first token.
pub fn predict_contexts<T: Scalar>(
    tape: &mut Tape<T>,
    c: Var,
    batch: usize,
    layout: &ChunkLayout,
    params: &BoundParams,
    config: &ModelConfig,
    dropout: &mut Option<Dropout>,
    records: &mut Vec<BlockRecord>,
) -> Result<Var> {
    let idx = &params.index;
    let norm = idx
        .predictor_norm
        .ok_or_else(|| Error::Contract("predictor requires at least one layer".into()))?;
    let chunks = layout.num_chunks();
    let positions: Vec<usize> = (0..batch).flat_map(|_| layout.chunk_positions.iter().copied()).collect();
    let pos = tape.embedding(idx.embed.position, &positions)?;
    let x = tape.add(c, pos)?;
    let x = run_stack(
        tape,
        x,
        &idx.predictor,
        Stack::Predictor,
        batch,
        chunks,
        config.n_heads,
        dropout,
        records,
    )?;
    tape.layer_norm(x, norm.gain, norm.bias, nn::LN_EPS)
}

/// `out[t] = direct[t] + ĉ[k(t)]` with slot 0 taken from `init_source`
/// (the row `b·T` of `h`, or a learned vector). Returns `(fused, broadcast)`.
pub fn broadcast_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    direct: Var,
    init_rows: Var,
    c_hat: Option<Var>,
    batch: usize,
    layout: &ChunkLayout,
) -> Result<(Var, Var)> {
    let n_init = tape.value(init_rows).rows();
    let table = match c_hat {
        Some(ch) => tape.concat_rows(&[init_rows, ch])?,
        None => init_rows,
    };
    let chunks = layout.num_chunks();
    let mut index = Vec::with_capacity(batch * layout.seq_len);
    for b in 0..batch {
        for &k in &layout.broadcast_index {
            index.push(if k == 0 {
                if n_init == 1 {
                    0
                } else {
                    b
                }
            } else {
                n_init + b * chunks + (k - 1)
            });
        }
    }
    let broadcast = tape.gather_rows(table, &index)?;
    let fused = tape.add(direct, broadcast)?;
    Ok((fused, broadcast))
}

/// Full teacher-forced forward. Logit row `t` predicts token `t + 1`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    tokens: &TokenBatch,
    mut opts: ForwardOptions,
) -> Result<ForwardTrace> {
    let config = params.config();
    check_tokens(config, tokens)?;
    let (batch, seq) = (tokens.batch, tokens.seq);
    let idx = &bound.index;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let x = nn::embed(tape, &idx.embed, &tokens.ids, &positions)?;
    let mut blocks = Vec::new();
    let h = run_stack(
        tape,
        x,
        &idx.encoder,
        Stack::Encoder,
        batch,
        seq,
        config.n_heads,
        &mut opts.dropout,
        &mut blocks,
    )?;

    let (layout, c, c_hat, broadcast, fused) = if config.is_contextlm() && !opts.zero_fusion {
        let layout = ChunkLayout::with_prefix(seq, config.chunk_size);
        let source = if opts.detach_context_source { tape.detach(h) } else { h };
        let direct = if opts.detach_direct { tape.detach(h) } else { h };
        let (c, c_hat) = if layout.num_chunks() > 0 {
            let c = pool_contexts(tape, source, batch, &layout)?;
            let ch = predict_contexts(tape, c, batch, &layout, bound, config, &mut opts.dropout, &mut blocks)?;
            (Some(c), Some(ch))
        } else {
            (None, None)
        };
        let init_rows = match (config.c_init, idx.c_init) {
            (CInit::Learned, Some(v)) => v,
            _ => {
                let firsts: Vec<usize> = (0..batch).map(|b| b * seq).collect();
                tape.gather_rows(source, &firsts)?
            }
        };
        let (fused, broadcast) = broadcast_fuse(tape, direct, init_rows, c_hat, batch, &layout)?;
        (Some(layout), c, c_hat, Some(broadcast), fused)
    } else {
        (None, None, None, None, h)
    };

    let y = run_stack(
        tape,
        fused,
        &idx.decoder,
        Stack::Decoder,
        batch,
        seq,
        config.n_heads,
        &mut opts.dropout,
        &mut blocks,
    )?;
    let logits = nn::lm_head(tape, y, &idx.final_norm, &idx.embed, idx.head)?;
    Ok(ForwardTrace {
        batch,
        seq,
        layout,
        h,
        c,
        c_hat,
        broadcast,
        fused,
        logits,
        blocks,
    })
}

/// Convenience: forward without gradients, returning logits `[batch·seq, V]`.
pub fn logits<T: Scalar>(params: &ModelParams<T>, tokens: &TokenBatch) -> Result<crate::tensor::Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(&mut tape, params, &bound, tokens, ForwardOptions::default())?;
    Ok(tape.value(trace.logits).clone())
}

/// Mean next-token loss of one forward pass plus parameter gradients.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &TokenBatch,
    targets: &[usize],
    opts: ForwardOptions,
) -> Result<(T, Vec<crate::tensor::Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let trace = forward(&mut tape, params, &bound, inputs, opts)?;
    let loss = tape.cross_entropy(trace.logits, targets, None)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((value, bound.grads(&tape)))
}

/// Loss only; `targets` may contain `ignore` for positions without a target.
pub fn loss<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &TokenBatch,
    targets: &[usize],
    ignore: Option<usize>,
) -> Result<T> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(&mut tape, params, &bound, inputs, ForwardOptions::default())?;
    let loss = tape.cross_entropy(trace.logits, targets, ignore)?;
    Ok(tape.value(loss).data()[0])
}

