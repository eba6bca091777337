//! Byte-level corpus and seeded window sampling.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Raw bytes with a contiguous train prefix and validation suffix.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    train: Range<usize>,
    val: Range<usize>,
}

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`encode`]; ids above 255 are rejected.
pub fn decode(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| Error::Index {
                op: "decode",
                index: i,
                bound: BYTE_VOCAB,
            })
        })
        .collect()
}

pub fn load_corpus(path: &Path, val_fraction: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_bytes(bytes, val_fraction)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl Corpus {
    /// The last `val_fraction` of the bytes (rounded down) is validation.
    pub fn from_bytes(bytes: Vec<u8>, val_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        if !(val_fraction > 0.0 && val_fraction < 0.5) {
            return Err(Error::Data(format!("val_fraction must be in (0, 0.5), got {val_fraction}")));
        }
        let n = bytes.len();
        let n_val = (n as f64 * val_fraction).floor() as usize;
        let cut = n - n_val;
        Ok(Self {
            bytes,
            train: 0..cut,
            val: cut..n,
        })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
        }
    }

    pub fn split(&self, split: Split) -> &[u8] {
        &self.bytes[self.range(split)]
    }
}

/// Resumable position of a sampler's random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a `u128`).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws `batch_size` random windows of `seq_len + 1` bytes from one split.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    seed: u64,
    seq_len: usize,
    batch_size: usize,
    range: Range<usize>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(corpus: &Corpus, split: Split, seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let range = corpus.range(split);
        if seq_len == 0 || batch_size == 0 {
            return Err(Error::Contract("seq_len and batch_size must be positive".into()));
        }
        if range.len() <= seq_len + 1 {
            return Err(Error::Contract(format!(
                "{} split has {} bytes, needs more than seq_len + 1 = {}",
                split.name(),
                range.len(),
                seq_len + 1
            )));
        }
        Ok(Self {
            seed,
            seq_len,
            batch_size,
            range,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: SamplerState) {
        self.seed = state.seed;
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(state.word_pos);
    }

    /// Window starts are uniform over every position that keeps the whole
    /// `seq_len + 1` window inside the split.
    pub fn next_starts(&mut self) -> Vec<usize> {
        let last = self.range.end - (self.seq_len + 1);
        (0..self.batch_size)
            .map(|_| self.rng.gen_range(self.range.start..=last))
            .collect()
    }

    /// `(inputs, targets)` with `targets[b][t] = inputs[b][t + 1]`.
    pub fn next_batch(&mut self, corpus: &Corpus) -> (TokenBatch, Vec<usize>) {
        let starts = self.next_starts();
        windows(corpus.bytes(), &starts, self.seq_len)
    }
}

/// Builds inputs and shifted targets from windows of `seq_len + 1` bytes.
pub fn windows(bytes: &[u8], starts: &[usize], seq_len: usize) -> (TokenBatch, Vec<usize>) {
    let mut ids = Vec::with_capacity(starts.len() * seq_len);
    let mut targets = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        let w = &bytes[s..s + seq_len + 1];
        ids.extend(w[..seq_len].iter().map(|&b| b as usize));
        targets.extend(w[1..].iter().map(|&b| b as usize));
    }
    let batch = TokenBatch::new(ids, starts.len(), seq_len).expect("window shape");
    (batch, targets)
}
