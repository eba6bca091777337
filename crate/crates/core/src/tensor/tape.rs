//! Dynamic reverse-mode differentiation tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node owns its
//! output value plus whatever it needs for its backward rule; [`Tape::backward`]
//! replays the rules in reverse recording order and accumulates gradients into
//! every node that requires them.

use std::fmt;

use rand::Rng;

use super::kernels::{self, AttnDims, MatMut, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Detach,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Scale,
    Mul,
    Sum,
    Gelu,
    LayerNorm,
    SoftmaxRows,
    Embedding,
    Attention,
    CrossEntropy,
    MeanPool,
    GatherRows,
    ConcatRows,
    Dropout,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::SoftmaxRows,
        OpKind::Embedding,
        OpKind::Attention,
        OpKind::CrossEntropy,
        OpKind::MeanPool,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Detach => "detach",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Embedding => "embedding",
            OpKind::Attention => "causal_attention",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::MeanPool => "mean_pool",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Dropout => "dropout",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(std::iter::once(OpKind::Detach))
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Detach,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, s: T },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    SoftmaxRows { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    MeanPool { h: Var, batch: usize, seq: usize, width: usize, chunks: usize },
    GatherRows { src: Var, index: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Dropout { x: Var, mask: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Detach => OpKind::Detach,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::Mul { .. } => OpKind::Mul,
            Op::Sum { .. } => OpKind::Sum,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::MeanPool { .. } => OpKind::MeanPool,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::Dropout { .. } => OpKind::Dropout,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Tape whose backward rule for `kind` is deliberately wrong by 1%.
    /// Only used to prove that gradient checks catch broken rules.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` if no gradient
    /// reached the node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node, zeros when nothing flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Floats held by non-leaf node values plus saved attention weights.
    pub fn activation_floats(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Leaf => 0,
                Op::Attention { probs, .. } => n.value.numel() + probs.len(),
                _ => n.value.numel(),
            })
            .sum()
    }

    /// Multiply-adds of the recorded matrix products, attention counted as a
    /// full `seq × seq` score and value product.
    pub fn multiply_adds(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                &Op::MatMul { a, b } => {
                    let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
                    (sa[0] * sa[1] * sb[1]) as u64
                }
                Op::Attention { dims, .. } => (2 * dims.batch * dims.seq * dims.seq * dims.d_model) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Saved attention weights `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], AttnDims)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, dims, .. } => Some((probs, *dims)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.value(v).shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Identity in the forward pass; blocks gradient flow into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            MatMut::dense(&mut out, m, n),
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.numel() != d {
            return Err(Error::shape("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += *b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| *v * s).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| kernels::gelu(*v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.last_dim();
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut out = vec![T::zero(); vx.numel()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_forward(vx.data(), vg.data(), vb.data(), T::of(eps), &mut out, &mut mean, &mut rstd);
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, mean, rstd }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                msg: "NaN in input".into(),
            });
        }
        let d = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows { x }, rg))
    }

    /// Row lookup `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal attention on already-projected `q`, `k`, `v`, each
    /// `[batch·seq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(Error::shape("attention", self.value(q).shape(), self.value(other).shape()));
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "attention over [{rows}, {d}] with batch={batch} seq={seq} heads={heads}"
            )));
        }
        let dims = AttnDims {
            batch,
            seq,
            heads,
            d_model: d,
        };
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            &mut out,
            &mut probs,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::new([rows, d], out)?, Op::Attention { q, k, v, dims, probs }, rg))
    }

    /// Mean token-level cross-entropy over rows whose target differs from
    /// `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let counted = targets.iter().filter(|&&t| Some(t) != ignore_index).count();
        if counted == 0 {
            return Err(Error::Numeric {
                op: "cross_entropy",
                msg: "every position is ignored; mean is undefined".into(),
            });
        }
        let w = T::of(1.0 / counted as f64);
        let weights: Vec<T> = targets
            .iter()
            .map(|&t| if Some(t) == ignore_index { T::zero() } else { w })
            .collect();
        self.weighted_nll(logits, targets, &weights)
    }

    /// `Σᵢ weights[i] · (−log softmax(logits[i])[targets[i]])`; rows with zero
    /// weight are skipped entirely (their target is not inspected).
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape("cross_entropy", &[n, v], &[targets.len()]));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * v];
        let mut loss = T::zero();
        for i in 0..n {
            if weights[i] == T::zero() {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &z[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            loss += weights[i] * (lse - row[t]);
            let pr = &mut probs[i * v..(i + 1) * v];
            pr.copy_from_slice(row);
            kernels::softmax_in_place(pr);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of each aligned `width`-row window: `out[b, j] = mean(h[b, j·width .. (j+1)·width])`
    /// for `j < chunks`.
    pub fn mean_pool(&mut self, h: Var, batch: usize, seq: usize, width: usize, chunks: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(h, "mean_pool")?;
        if rows != batch * seq || width == 0 || chunks * width > seq {
            return Err(Error::Contract(format!(
                "mean_pool of [{rows}, {d}] into {chunks} windows of {width} (batch={batch}, seq={seq})"
            )));
        }
        let src = self.value(h).data();
        let inv = T::of(width as f64);
        let mut out = vec![T::zero(); batch * chunks * d];
        for b in 0..batch {
            for j in 0..chunks {
                let o = &mut out[(b * chunks + j) * d..][..d];
                for t in j * width..(j + 1) * width {
                    let r = &src[(b * seq + t) * d..][..d];
                    for (x, y) in o.iter_mut().zip(r) {
                        *x += *y;
                    }
                }
                for x in o.iter_mut() {
                    *x /= inv;
                }
            }
        }
        let rg = self.rg(&[h]);
        Ok(self.push(
            Tensor::new([batch * chunks, d], out)?,
            Op::MeanPool {
                h,
                batch,
                seq,
                width,
                chunks,
            },
            rg,
        ))
    }

    /// `out[i] = src[index[i]]` over rows.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(src, "gather_rows")?;
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&s[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new([index.len(), d], out)?,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new([rows, d], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout with keep-probability `1 − p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        let vx = self.value(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..vx.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = vx.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`. Previous gradients are
    /// discarded, so repeated calls are bit-identical.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_from(loss, &[T::one()])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back
    /// through the graph.
    pub fn backward_from(&mut self, out: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::Contract(format!(
                "seed has {} entries, output {:?} needs {}",
                seed.len(),
                self.value(out).shape(),
                self.value(out).numel()
            )));
        }
        let loss = out;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(seed.to_vec());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: lower,
                faulty: self.fault == Some(node.op.kind()),
            };
            backward_node(node, g, &mut acc);
        }
        Ok(())
    }
}

struct Accumulator<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    faulty: bool,
}

impl<T: Scalar> Accumulator<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Adds a branch contribution. Branches sum in the order they arrive.
    fn add(&mut self, v: Var, mut contrib: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        if self.faulty {
            let bump = T::of(1.01);
            contrib.iter_mut().for_each(|x| *x *= bump);
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

fn backward_node<T: Scalar>(node: &Node<T>, g: &[T], acc: &mut Accumulator<'_, T>) {
    match &node.op {
        Op::Leaf | Op::Detach => {}
        &Op::MatMul { a, b } => {
            let (m, k) = (acc.value(a).shape()[0], acc.value(a).shape()[1]);
            let n = acc.value(b).shape()[1];
            if acc.wants(a) {
                let mut da = vec![T::zero(); m * k];
                kernels::gemm(
                    MatRef::dense(g, m, n),
                    MatRef::dense_t(acc.value(b).data(), k, n),
                    MatMut::dense(&mut da, m, k),
                    false,
                );
                acc.add(a, da);
            }
            if acc.wants(b) {
                let mut db = vec![T::zero(); k * n];
                kernels::gemm(
                    MatRef::dense_t(acc.value(a).data(), m, k),
                    MatRef::dense(g, m, n),
                    MatMut::dense(&mut db, k, n),
                    false,
                );
                acc.add(b, db);
            }
        }
        &Op::Transpose { x } => {
            let (r, c) = (acc.value(x).shape()[0], acc.value(x).shape()[1]);
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            acc.add(x, dx);
        }
        &Op::Add { a, b } => {
            acc.add(a, g.to_vec());
            acc.add(b, g.to_vec());
        }
        &Op::AddRow { x, bias } => {
            acc.add(x, g.to_vec());
            if acc.wants(bias) {
                let d = acc.value(bias).numel();
                let mut db = vec![T::zero(); d];
                for row in g.chunks_exact(d) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += *v;
                    }
                }
                acc.add(bias, db);
            }
        }
        &Op::Scale { x, s } => acc.add(x, g.iter().map(|v| *v * s).collect()),
        &Op::Mul { a, b } => {
            let da = g.iter().zip(acc.value(b).data()).map(|(x, y)| *x * *y).collect();
            let db = g.iter().zip(acc.value(a).data()).map(|(x, y)| *x * *y).collect();
            acc.add(a, da);
            acc.add(b, db);
        }
        &Op::Sum { x } => {
            let n = acc.value(x).numel();
            acc.add(x, vec![g[0]; n]);
        }
        &Op::Gelu { x } => {
            let dx = acc
                .value(x)
                .data()
                .iter()
                .zip(g)
                .map(|(v, gv)| kernels::gelu_grad(*v) * *gv)
                .collect();
            acc.add(x, dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let d = acc.value(*gain).numel();
            let mut dx = vec![T::zero(); acc.value(*x).numel()];
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            kernels::layer_norm_backward(
                acc.value(*x).data(),
                acc.value(*gain).data(),
                mean,
                rstd,
                g,
                &mut dx,
                &mut dg,
                &mut db,
            );
            acc.add(*x, dx);
            acc.add(*gain, dg);
            acc.add(*bias, db);
        }
        &Op::SoftmaxRows { x } => {
            let y = node.value.data();
            let d = node.value.last_dim();
            let mut dx = vec![T::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                let mut dot = T::zero();
                for (a, b) in yr.iter().zip(gr) {
                    dot += *a * *b;
                }
                for i in 0..d {
                    dr[i] = yr[i] * (gr[i] - dot);
                }
            }
            acc.add(x, dx);
        }
        Op::Embedding { table, ids } => {
            if acc.wants(*table) {
                let d = acc.value(*table).shape()[1];
                let mut dt = vec![T::zero(); acc.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += *v;
                    }
                }
                acc.add(*table, dt);
            }
        }
        Op::Attention { q, k, v, dims, probs } => {
            let n = acc.value(*q).numel();
            let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
            kernels::attention_backward(
                acc.value(*q).data(),
                acc.value(*k).data(),
                acc.value(*v).data(),
                probs,
                g,
                *dims,
                &mut dq,
                &mut dk,
                &mut dv,
            );
            acc.add(*q, dq);
            acc.add(*k, dk);
            acc.add(*v, dv);
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let v = acc.value(*logits).shape()[1];
            let mut dz = vec![T::zero(); probs.len()];
            for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == T::zero() {
                    continue;
                }
                let scale = w * g[0];
                let (pr, dr) = (&probs[i * v..(i + 1) * v], &mut dz[i * v..(i + 1) * v]);
                for j in 0..v {
                    dr[j] = pr[j] * scale;
                }
                dr[t] -= scale;
            }
            acc.add(*logits, dz);
        }
        &Op::MeanPool {
            h,
            batch,
            seq,
            width,
            chunks,
        } => {
            let d = acc.value(h).last_dim();
            let inv = T::of(width as f64);
            let mut dh = vec![T::zero(); batch * seq * d];
            for b in 0..batch {
                for j in 0..chunks {
                    let gr = &g[(b * chunks + j) * d..][..d];
                    for t in j * width..(j + 1) * width {
                        for (o, v) in dh[(b * seq + t) * d..][..d].iter_mut().zip(gr) {
                            *o = *v / inv;
                        }
                    }
                }
            }
            acc.add(h, dh);
        }
        Op::GatherRows { src, index } => {
            if acc.wants(*src) {
                let d = acc.value(*src).last_dim();
                let mut ds = vec![T::zero(); acc.value(*src).numel()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in ds[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += *v;
                    }
                }
                acc.add(*src, ds);
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = acc.value(p).numel();
                acc.add(p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::Dropout { x, mask } => {
            acc.add(*x, g.iter().zip(mask).map(|(a, m)| *a * *m).collect());
        }
    }
}
