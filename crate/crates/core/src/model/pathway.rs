//! Decomposition of the encoder gradient into its token-level and
//! context-level pathways, and of each predicted context's gradient into
//! per-position contributions.
//!
//! Every quantity is obtained from a separate backward pass so the identities
//! are checked across independent routes:
//!
//! * `∂L/∂h` (full) against the sum of the pass with the pooling/placeholder
//!   branch detached and the pass with the direct fusion branch detached.
//! * `∂L/∂ĉₖ` (from the broadcast gather's backward) against the manual sum of
//!   the gradients reaching the broadcast copies at positions `t ∈ 𝒥ₖ`.
//! * `∂L/∂ĉₖ` against the sum over single-position losses `ℓⱼ / N`, each with its
//!   own backward pass. Positions before `𝒥ₖ` must contribute exactly zero.

use serde::Serialize;

use super::forward::{forward, ForwardOptions, ForwardTrace, TokenBatch};
use super::layout::ChunkLayout;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Default, Serialize)]
pub struct PathwayResiduals {
    /// `max |∂L/∂h − (token pathway + context pathway)|`.
    pub pathway_split: f64,
    /// `max |∂L/∂ĉₖ − Σ_{t∈𝒥ₖ} ∂L/∂(broadcast copy at t)|`.
    pub chunk_aggregation: f64,
    /// Largest gradient reaching a broadcast copy of `ĉₖ` from outside `𝒥ₖ`,
    /// measured as the residual of summing all copies routed to slot `k`
    /// against the gather backward restricted to `𝒥ₖ`.
    pub segment_leakage: f64,
    /// `max |∂L/∂ĉₖ − Σⱼ ∂(ℓⱼ/N)/∂ĉₖ|` over all positions `j`.
    pub per_token_sum: f64,
    /// Largest `|∂(ℓⱼ/N)/∂ĉₖ|` for `j < min 𝒥ₖ`; must be exactly zero.
    pub per_token_causal: f64,
    /// `‖Σ_{j > max 𝒥ₖ} ∂(ℓⱼ/N)/∂ĉₖ‖ / ‖∂L/∂ĉₖ‖`, the share of a chunk's
    /// supervision arriving through later positions' decoder attention.
    /// Informational only.
    pub downstream_share: f64,
}

#[derive(Clone, Debug)]
pub struct PathwayReport {
    pub layout: Option<ChunkLayout>,
    /// (a) `∂L/∂h`, `[B·T, d]`.
    pub full: Tensor<f64>,
    /// (b) gradient with the pooling/placeholder branch detached.
    pub token_pathway: Tensor<f64>,
    /// (c) gradient with the direct fusion branch detached.
    pub context_pathway: Tensor<f64>,
    /// (d) `∂L/∂ĉₖ` for `k ≥ 1`, `[B·(K−1), d]`.
    pub chunk_grads: Tensor<f64>,
    /// (e) gradient reaching each position's broadcast copy, `[B·T, d]`.
    pub slot_grads: Tensor<f64>,
    /// `∂(ℓⱼ/N)/∂ĉ` for every position `j`, each `[B·(K−1), d]`.
    pub token_loss_grads: Vec<Tensor<f64>>,
    pub residuals: PathwayResiduals,
}

fn run(
    params: &ModelParams<f64>,
    inputs: &TokenBatch,
    targets: &[usize],
    weights: &[f64],
    opts: ForwardOptions,
) -> Result<(Tape<f64>, ForwardTrace)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let trace = forward(&mut tape, params, &bound, inputs, opts)?;
    let loss = tape.weighted_nll(trace.logits, targets, weights)?;
    tape.backward(loss)?;
    Ok((tape, trace))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds the full decomposition for one batch in f64. `targets` has one
/// entry per position; the loss is the mean over all of them.
pub fn grad_pathway_report(params: &ModelParams<f64>, inputs: &TokenBatch, targets: &[usize]) -> Result<PathwayReport> {
    let n = inputs.ids.len();
    if targets.len() != n {
        return Err(Error::shape("grad_pathway_report", &[n], &[targets.len()]));
    }
    let mean_w = vec![1.0 / n as f64; n];
    let (tape, trace) = run(params, inputs, targets, &mean_w, ForwardOptions::default())?;
    let full = tape.grad_tensor(trace.h);
    let (tape_b, trace_b) = run(
        params,
        inputs,
        targets,
        &mean_w,
        ForwardOptions {
            detach_context_source: true,
            ..Default::default()
        },
    )?;
    let token_pathway = tape_b.grad_tensor(trace_b.h);
    let (tape_c, trace_c) = run(
        params,
        inputs,
        targets,
        &mean_w,
        ForwardOptions {
            detach_direct: true,
            ..Default::default()
        },
    )?;
    let context_pathway = if trace_c.layout.is_some() {
        tape_c.grad_tensor(trace_c.h)
    } else {
        Tensor::zeros(full.shape().to_vec())
    };

    let mut residuals = PathwayResiduals {
        pathway_split: full
            .data()
            .iter()
            .zip(token_pathway.data().iter().zip(context_pathway.data()))
            .map(|(a, (b, c))| (a - (b + c)).abs())
            .fold(0.0, f64::max),
        ..Default::default()
    };

    let d = params.config().d_model;
    let (batch, seq) = (inputs.batch, inputs.seq);
    let Some(c_hat) = trace.c_hat else {
        let empty = Tensor::zeros([0, d]);
        let slot_grads = trace
            .broadcast
            .map(|b| tape.grad_tensor(b))
            .unwrap_or_else(|| Tensor::zeros([n, d]));
        return Ok(PathwayReport {
            layout: trace.layout,
            full,
            token_pathway,
            context_pathway,
            chunk_grads: empty,
            slot_grads,
            token_loss_grads: Vec::new(),
            residuals,
        });
    };
    let layout = trace.layout.clone().expect("contextlm trace has a layout");
    let chunks = layout.num_chunks();
    let chunk_grads = tape.grad_tensor(c_hat);
    let slot_grads = tape.grad_tensor(trace.broadcast.expect("broadcast node"));

    // Route 2: manual aggregation of broadcast-copy gradients over 𝒥ₖ.
    let mut aggregated = vec![0.0; batch * chunks * d];
    let mut routed = vec![0.0; batch * chunks * d];
    for b in 0..batch {
        for k in 1..layout.num_slots {
            let row = &mut aggregated[(b * chunks + k - 1) * d..][..d];
            for t in layout.segments[k].clone() {
                for (o, g) in row.iter_mut().zip(slot_grads.row(b * seq + t)) {
                    *o += g;
                }
            }
        }
        for t in 0..seq {
            let k = layout.slot_of(t);
            if k == 0 {
                continue;
            }
            let row = &mut routed[(b * chunks + k - 1) * d..][..d];
            for (o, g) in row.iter_mut().zip(slot_grads.row(b * seq + t)) {
                *o += g;
            }
        }
    }
    residuals.chunk_aggregation = max_abs_diff(chunk_grads.data(), &aggregated);
    residuals.segment_leakage = max_abs_diff(&routed, &aggregated);

    // Route 3: one backward per single-position loss.
    let mut token_loss_grads = Vec::with_capacity(n);
    let mut summed = vec![0.0; batch * chunks * d];
    let mut downstream = vec![0.0; batch * chunks * d];
    for j in 0..n {
        let mut w = vec![0.0; n];
        w[j] = 1.0 / n as f64;
        let (tp, tr) = run(params, inputs, targets, &w, ForwardOptions::default())?;
        let g = tp.grad_tensor(tr.c_hat.expect("c_hat"));
        let (bj, tj) = (j / seq, j % seq);
        for (o, v) in summed.iter_mut().zip(g.data()) {
            *o += v;
        }
        for b in 0..batch {
            for k in 1..layout.num_slots {
                let row = g.row(b * chunks + k - 1);
                let seg = &layout.segments[k];
                if b == bj && tj < seg.start {
                    let worst = row.iter().map(|x| x.abs()).fold(0.0, f64::max);
                    residuals.per_token_causal = residuals.per_token_causal.max(worst);
                }
                if b == bj && tj >= seg.end {
                    for (o, v) in downstream[(b * chunks + k - 1) * d..][..d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        token_loss_grads.push(g);
    }
    residuals.per_token_sum = max_abs_diff(chunk_grads.data(), &summed);
    let total = norm(chunk_grads.data());
    residuals.downstream_share = if total > 0.0 { norm(&downstream) / total } else { 0.0 };

    Ok(PathwayReport {
        layout: Some(layout),
        full,
        token_pathway,
        context_pathway,
        chunk_grads,
        slot_grads,
        token_loss_grads,
        residuals,
    })
}

impl PathwayReport {
    /// Fails naming the first identity whose residual exceeds `tol`.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let r = &self.residuals;
        let checks = [
            ("encoder gradient = token pathway + context pathway", r.pathway_split),
            ("chunk gradient = sum of broadcast-copy gradients over its segment", r.chunk_aggregation),
            ("no broadcast-copy gradient from outside the segment", r.segment_leakage),
            ("chunk gradient = sum of per-position loss gradients", r.per_token_sum),
            ("positions before a segment contribute zero", r.per_token_causal),
        ];
        for (name, value) in checks {
            if !(value <= tol) {
                return Err(Error::Verification(format!("{name}: residual {value:e} > {tol:e}")));
            }
        }
        Ok(())
    }
}
