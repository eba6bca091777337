//! Segmentation of a length-`T` sequence into pooling windows and
//! broadcast segments.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};

/// Pooling windows are the aligned spans `[j·w, (j+1)·w)` for `j < ⌊T/w⌋`.
/// Position `t` is fused with context slot `k(t) = ⌊(t+1)/w⌋`, where slot 0 is
/// the placeholder context and slot `k ≥ 1` is the prediction made from pooled
/// windows `0..k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChunkLayout {
    pub seq_len: usize,
    pub chunk_size: usize,
    /// `K = ⌊T/w⌋ + 1`, the placeholder slot included.
    pub num_slots: usize,
    pub pool_spans: Vec<Range<usize>>,
    pub broadcast_index: Vec<usize>,
    /// `𝒥ₖ` for `k = 0..K`, as contiguous token ranges.
    pub segments: Vec<Range<usize>>,
    /// Position id of the first token of each pooled window.
    pub chunk_positions: Vec<usize>,
}

/// Checked constructor: requires `T ≥ 1`, `w ≥ 2` and at least one full window.
pub fn build_chunk_layout(seq_len: usize, chunk_size: usize) -> Result<ChunkLayout> {
    if seq_len == 0 {
        return Err(Error::Layout("sequence length must be at least 1".into()));
    }
    if chunk_size < 2 {
        return Err(Error::Layout(format!("chunk size must be at least 2, got {chunk_size}")));
    }
    if chunk_size > seq_len {
        return Err(Error::Layout(format!(
            "chunk size {chunk_size} exceeds sequence length {seq_len}; no full chunk exists"
        )));
    }
    Ok(ChunkLayout::with_prefix(seq_len, chunk_size))
}

impl ChunkLayout {
    /// Layout that also admits `T < w`, where every position uses the
    /// placeholder context. Used for prompts shorter than one window.
    pub fn with_prefix(seq_len: usize, chunk_size: usize) -> Self {
        assert!(chunk_size >= 1, "chunk size must be positive");
        let w = chunk_size;
        let pooled = seq_len / w;
        let num_slots = pooled + 1;
        let broadcast_index: Vec<usize> = (0..seq_len).map(|t| (t + 1) / w).collect();
        let segments = (0..num_slots)
            .map(|k| {
                let start = (k * w).saturating_sub(1).min(seq_len);
                let end = if k + 1 == num_slots {
                    seq_len
                } else {
                    ((k + 1) * w - 1).min(seq_len)
                };
                start..end
            })
            .collect();
        Self {
            seq_len,
            chunk_size: w,
            num_slots,
            pool_spans: (0..pooled).map(|j| j * w..(j + 1) * w).collect(),
            broadcast_index,
            segments,
            chunk_positions: (0..pooled).map(|j| j * w).collect(),
        }
    }

    /// Number of pooled windows, `K − 1`.
    pub fn num_chunks(&self) -> usize {
        self.num_slots - 1
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        self.segments.iter().map(|r| r.len()).collect()
    }

    pub fn slot_of(&self, t: usize) -> usize {
        self.broadcast_index[t]
    }

    /// Largest token index feeding predicted slot `k ≥ 1`.
    pub fn max_source_index(&self, k: usize) -> usize {
        self.pool_spans[k - 1].end - 1
    }
}
