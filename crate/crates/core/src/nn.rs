//! Transformer building blocks shared by the baseline and ContextLM models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Layer-norm affine parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormParams<H> {
    pub gain: H,
    pub bias: H,
}

impl<H: Copy> NormParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(H) -> U) -> NormParams<U> {
        NormParams {
            gain: f(self.gain),
            bias: f(self.bias),
        }
    }
}

/// One pre-norm block. Attention projections are bias-free `d×d`; the MLP is
/// `d → 4d → d` with biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams<H> {
    pub ln1: NormParams<H>,
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    pub w_o: H,
    pub ln2: NormParams<H>,
    pub w_fc: H,
    pub b_fc: H,
    pub w_proj: H,
    pub b_proj: H,
}

impl<H: Copy> BlockParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(H) -> U) -> BlockParams<U> {
        BlockParams {
            ln1: self.ln1.map(&mut f),
            w_q: f(self.w_q),
            w_k: f(self.w_k),
            w_v: f(self.w_v),
            w_o: f(self.w_o),
            ln2: self.ln2.map(&mut f),
            w_fc: f(self.w_fc),
            b_fc: f(self.b_fc),
            w_proj: f(self.w_proj),
            b_proj: f(self.b_proj),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingParams<H> {
    /// `V × d`; doubles as the output head when embeddings are tied.
    pub token: H,
    /// `T_max × d` learned absolute positions.
    pub position: H,
}

/// Seeded inverted dropout applied to residual branches during training.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

/// Nodes of interest recorded while running one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub output: Var,
    pub attention: Var,
    pub keys: Var,
    pub values: Var,
}

/// `token_table[tokens] + position_table[positions]`, as `[len, d]`.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    emb: &EmbeddingParams<Var>,
    tokens: &[usize],
    positions: &[usize],
) -> Result<Var> {
    let tok = tape.embedding(emb.token, tokens)?;
    let pos = tape.embedding(emb.position, positions)?;
    tape.add(tok, pos)
}

/// Projections plus multi-head causal attention plus output projection.
/// `x` is `[batch·seq, d]`.
pub fn causal_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<Var>,
    batch: usize,
    seq: usize,
    n_heads: usize,
) -> Result<BlockTrace> {
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let attention = tape.attention(q, k, v, batch, seq, n_heads)?;
    let output = tape.matmul(attention, p.w_o)?;
    Ok(BlockTrace {
        output,
        attention,
        keys: k,
        values: v,
    })
}

/// `x + Attn(LN(x))`, then `+ MLP(LN(·))` with GELU.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<Var>,
    batch: usize,
    seq: usize,
    n_heads: usize,
    mut dropout: Option<&mut Dropout>,
) -> Result<BlockTrace> {
    let a = tape.layer_norm(x, p.ln1.gain, p.ln1.bias, LN_EPS)?;
    let mut attn = causal_attention(tape, a, p, batch, seq, n_heads)?;
    let mut branch = attn.output;
    if let Some(d) = dropout.as_deref_mut() {
        branch = tape.dropout(branch, d.p, &mut d.rng);
    }
    let x1 = tape.add(x, branch)?;
    let b = tape.layer_norm(x1, p.ln2.gain, p.ln2.bias, LN_EPS)?;
    let f = tape.matmul(b, p.w_fc)?;
    let f = tape.add_row(f, p.b_fc)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, p.w_proj)?;
    let mut f = tape.add_row(f, p.b_proj)?;
    if let Some(d) = dropout {
        f = tape.dropout(f, d.p, &mut d.rng);
    }
    attn.output = tape.add(x1, f)?;
    Ok(attn)
}

/// Final layer norm followed by the vocabulary projection. With `head = None`
/// the token table is reused transposed.
pub fn lm_head<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    final_norm: &NormParams<Var>,
    emb: &EmbeddingParams<Var>,
    head: Option<Var>,
) -> Result<Var> {
    let y = tape.layer_norm(x, final_norm.gain, final_norm.bias, LN_EPS)?;
    let w = match head {
        Some(h) => h,
        None => tape.transpose(emb.token)?,
    };
    tape.matmul(y, w)
}

pub(crate) fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut base = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20f);
    base.set_stream(step);
    ChaCha8Rng::seed_from_u64(base.gen())
}
