//! Two-level incremental decoding.
//!
//! Token-level key/value caches serve the encoder and decoder stacks; a
//! running accumulator pools the open window, and the predictor keeps its own
//! cache that grows by one slot per completed window. The predictor advances
//! eagerly when a window completes, so the context for every position is fixed
//! before that position is decoded.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, CInit, ForwardOptions, ModelParams, Stack, TokenBatch};
use crate::nn::{BlockParams, NormParams, LN_EPS};
use crate::tensor::kernels::{attend_cached, gelu, gemm, layer_norm_forward, vec_mat, MatMut, MatRef};
use crate::tensor::{Scalar, Tape};

/// Keys and values of one attention layer, one row of width `d` per slot.
#[derive(Clone, Debug, Default)]
pub struct KvCache<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub len: usize,
}

impl<T: Scalar> KvCache<T> {
    fn from_rows(keys: &[T], values: &[T], d: usize) -> Self {
        Self {
            keys: keys.to_vec(),
            values: values.to_vec(),
            len: keys.len() / d,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationState<T> {
    pub tokens: Vec<usize>,
    pub encoder: Vec<KvCache<T>>,
    pub decoder: Vec<KvCache<T>>,
    pub predictor: Vec<KvCache<T>>,
    /// Running sum of `h` over the open pooling window.
    pub acc_sum: Vec<T>,
    pub acc_fill: usize,
    /// `c_init` or the most recent `ĉₖ`; empty in baseline mode.
    pub context: Vec<T>,
    /// Next position to be decoded.
    pub pos: usize,
    pub predictor_steps: usize,
    /// Next-token logits for the last decoded position.
    pub logits: Vec<T>,
}

impl<T: Scalar> GenerationState<T> {
    /// Number of completed pooling windows.
    pub fn completed_chunks(&self) -> usize {
        self.predictor.first().map_or(0, |c| c.len)
    }
}

fn block_at<'a, T: Scalar>(params: &'a ModelParams<T>, p: &BlockParams<usize>) -> BlockParams<&'a [T]> {
    p.map(|i| params.tensor(i).data())
}

fn layer_norm_row<T: Scalar>(x: &[T], norm: &NormParams<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let (mut m, mut r) = ([T::zero()], [T::zero()]);
    layer_norm_forward(x, norm.gain, norm.bias, T::of(LN_EPS), &mut out, &mut m, &mut r);
    out
}

/// One pre-norm block over a single new row, appending its key and value to
/// `cache`.
fn block_step<T: Scalar>(x: &[T], p: &BlockParams<&[T]>, cache: &mut KvCache<T>, heads: usize) -> Vec<T> {
    let d = x.len();
    let a = layer_norm_row(x, &p.ln1);
    let mut q = vec![T::zero(); d];
    let mut k = vec![T::zero(); d];
    let mut v = vec![T::zero(); d];
    vec_mat(&a, p.w_q, &mut q);
    vec_mat(&a, p.w_k, &mut k);
    vec_mat(&a, p.w_v, &mut v);
    cache.keys.extend_from_slice(&k);
    cache.values.extend_from_slice(&v);
    cache.len += 1;
    let mut attn = vec![T::zero(); d];
    attend_cached(&q, &cache.keys, &cache.values, cache.len, heads, &mut attn);
    let mut o = vec![T::zero(); d];
    vec_mat(&attn, p.w_o, &mut o);
    let x1: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
    let b = layer_norm_row(&x1, &p.ln2);
    let mut f = vec![T::zero(); p.b_fc.len()];
    vec_mat(&b, p.w_fc, &mut f);
    for (v, &bias) in f.iter_mut().zip(p.b_fc) {
        *v = gelu(*v + bias);
    }
    let mut g = vec![T::zero(); d];
    vec_mat(&f, p.w_proj, &mut g);
    x1.iter()
        .zip(g.iter().zip(p.b_proj))
        .map(|(&a, (&b, &c))| a + (b + c))
        .collect()
}

fn head_logits<T: Scalar>(params: &ModelParams<T>, y: &[T]) -> Vec<T> {
    let idx = params.index();
    let norm = idx.final_norm.map(|i| params.tensor(i).data());
    let z = layer_norm_row(y, &norm);
    let v = params.config().vocab_size;
    let mut out = vec![T::zero(); v];
    match idx.head {
        Some(h) => vec_mat(&z, params.tensor(h).data(), &mut out),
        None => {
            let d = z.len();
            let table = params.tensor(idx.embed.token).data();
            gemm(
                MatRef::dense(&z, 1, d),
                MatRef::dense_t(table, v, d),
                MatMut::dense(&mut out, 1, v),
                false,
            );
        }
    }
    out
}

fn check_token<T: Scalar>(params: &ModelParams<T>, pos: usize, token: usize) -> Result<()> {
    let config = params.config();
    if pos >= config.max_seq_len {
        return Err(Error::Contract(format!(
            "position {pos} is past max_seq_len {}",
            config.max_seq_len
        )));
    }
    if token >= config.vocab_size {
        return Err(Error::Index {
            op: "decode_step",
            index: token,
            bound: config.vocab_size,
        });
    }
    Ok(())
}

/// Teacher-forced forward over the prompt, capturing every cache and the
/// open window's partial sum.
pub fn prefill<T: Scalar>(params: &ModelParams<T>, prompt: &[usize]) -> Result<GenerationState<T>> {
    if prompt.is_empty() {
        return Err(Error::Contract("prefill needs a non-empty prompt".into()));
    }
    let config = params.config();
    let d = config.d_model;
    let seq = prompt.len();
    let tokens = TokenBatch::single(prompt)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let trace = forward(&mut tape, params, &bound, &tokens, ForwardOptions::default())?;

    let cache_of = |stack: Stack| -> Vec<KvCache<T>> {
        trace
            .blocks
            .iter()
            .filter(|r| r.stack == stack)
            .map(|r| KvCache::from_rows(tape.value(r.trace.keys).data(), tape.value(r.trace.values).data(), d))
            .collect()
    };
    let encoder = cache_of(Stack::Encoder);
    let decoder = cache_of(Stack::Decoder);
    let mut predictor = Vec::new();
    let mut acc_sum = Vec::new();
    let mut acc_fill = 0;
    let mut context = Vec::new();
    if config.is_contextlm() {
        let w = config.chunk_size;
        let h = tape.value(trace.h);
        let chunks = seq / w;
        acc_sum = vec![T::zero(); d];
        for t in chunks * w..seq {
            for (a, &x) in acc_sum.iter_mut().zip(h.row(t)) {
                *a += x;
            }
        }
        acc_fill = seq - chunks * w;
        predictor = if chunks > 0 {
            cache_of(Stack::Predictor)
        } else {
            vec![KvCache::default(); config.n_ctx_layers]
        };
        context = match trace.c_hat {
            Some(ch) if chunks > 0 => tape.value(ch).row(chunks - 1).to_vec(),
            _ => match (config.c_init, params.index().c_init) {
                (CInit::Learned, Some(i)) => params.tensor(i).data().to_vec(),
                _ => h.row(0).to_vec(),
            },
        };
    }
    let logits = tape.value(trace.logits).row(seq - 1).to_vec();
    Ok(GenerationState {
        tokens: prompt.to_vec(),
        encoder,
        decoder,
        predictor_steps: predictor.first().map_or(0, |c| c.len),
        predictor,
        acc_sum,
        acc_fill,
        context,
        pos: seq,
        logits,
    })
}

/// Advances the predictor by one cached step on pooled context `c` (window
/// `j`), returning `ĉ_{j+1}`.
fn predictor_step<T: Scalar>(params: &ModelParams<T>, state: &mut GenerationState<T>, c: &[T], j: usize) -> Vec<T> {
    let config = params.config();
    let idx = params.index();
    let pos_row = j * config.chunk_size;
    let pos_table = params.tensor(idx.embed.position);
    let mut x: Vec<T> = c.iter().zip(pos_table.row(pos_row)).map(|(&a, &b)| a + b).collect();
    for (p, cache) in idx.predictor.iter().zip(state.predictor.iter_mut()) {
        x = block_step(&x, &block_at(params, p), cache, config.n_heads);
    }
    let norm = idx
        .predictor_norm
        .expect("contextlm has a predictor norm")
        .map(|i| params.tensor(i).data());
    state.predictor_steps += 1;
    layer_norm_row(&x, &norm)
}

/// Decodes `token` at the state's next position and returns the logits for
/// the position after it. On error the state is left untouched.
pub fn decode_step<T: Scalar>(state: &mut GenerationState<T>, params: &ModelParams<T>, token: usize) -> Result<Vec<T>> {
    let t = state.pos;
    check_token(params, t, token)?;
    let config = params.config();
    let idx = params.index();
    let tok = params.tensor(idx.embed.token);
    let pos = params.tensor(idx.embed.position);
    let mut h: Vec<T> = tok.row(token).iter().zip(pos.row(t)).map(|(&a, &b)| a + b).collect();
    for (p, cache) in idx.encoder.iter().zip(state.encoder.iter_mut()) {
        h = block_step(&h, &block_at(params, p), cache, config.n_heads);
    }
    let mut fused = h.clone();
    if config.is_contextlm() {
        let w = config.chunk_size;
        if t == 0 && config.c_init == CInit::FirstToken {
            state.context = h.clone();
        }
        for (a, &x) in state.acc_sum.iter_mut().zip(&h) {
            *a += x;
        }
        state.acc_fill += 1;
        if state.acc_fill == w {
            let inv = T::of(w as f64);
            let c: Vec<T> = state.acc_sum.iter().map(|&s| s / inv).collect();
            let j = (t + 1) / w - 1;
            state.context = predictor_step(params, state, &c, j);
            state.acc_sum.iter_mut().for_each(|a| *a = T::zero());
            state.acc_fill = 0;
        }
        for (f, &c) in fused.iter_mut().zip(&state.context) {
            *f += c;
        }
    }
    for (p, cache) in idx.decoder.iter().zip(state.decoder.iter_mut()) {
        fused = block_step(&fused, &block_at(params, p), cache, config.n_heads);
    }
    let logits = head_logits(params, &fused);
    state.tokens.push(token);
    state.pos += 1;
    state.logits = logits.clone();
    Ok(logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            top_k: 40,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errors.push(format!("sampler.temperature must be > 0, got {}", self.temperature));
        }
        if self.top_k == 0 {
            errors.push("sampler.top_k must be >= 1".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Lowest index among the maxima.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, rng })
    }

    /// Temperature divide, then top-k filter, then renormalize and sample.
    pub fn sample<T: Scalar>(&mut self, logits: &[T]) -> usize {
        if self.config.strategy == Strategy::Greedy {
            return argmax(logits);
        }
        let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / self.config.temperature).collect();
        let mut keep: Vec<usize> = (0..scaled.len()).collect();
        if self.config.strategy == Strategy::TopK && self.config.top_k < keep.len() {
            keep.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
            keep.truncate(self.config.top_k);
            keep.sort_unstable();
        }
        let max = keep.iter().map(|&i| scaled[i]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = keep.iter().map(|&i| (scaled[i] - max).exp()).collect();
        match WeightedIndex::new(&weights) {
            Ok(dist) => keep[dist.sample(&mut self.rng)],
            Err(_) => argmax(logits),
        }
    }
}

/// Prefills on `prompt` and appends `n_new` sampled tokens.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[usize],
    n_new: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<usize>> {
    let total = prompt.len() + n_new;
    let max = params.config().max_seq_len;
    if total > max {
        return Err(Error::Contract(format!(
            "prompt ({}) plus {n_new} new tokens exceeds max_seq_len {max}",
            prompt.len()
        )));
    }
    let mut sampler = Sampler::new(sampler.clone())?;
    if n_new == 0 {
        return Ok(prompt.to_vec());
    }
    let mut state = prefill(params, prompt)?;
    let mut out = prompt.to_vec();
    let mut logits = state.logits.clone();
    for i in 0..n_new {
        let next = sampler.sample(&logits);
        out.push(next);
        if i + 1 < n_new {
            logits = decode_step(&mut state, params, next)?;
        }
    }
    Ok(out)
}

/// Greedy continuation by re-running the full forward at every step.
pub fn generate_full_recompute<T: Scalar>(params: &ModelParams<T>, prompt: &[usize], n_new: usize) -> Result<Vec<usize>> {
    let mut out = prompt.to_vec();
    let v = params.config().vocab_size;
    for _ in 0..n_new {
        let logits = crate::model::logits(params, &TokenBatch::single(&out)?)?;
        let last = &logits.data()[(out.len() - 1) * v..];
        out.push(argmax(last));
    }
    Ok(out)
}
