//! Slice-level numeric kernels shared by the tape and the cached decoder.
//!
//! All reductions run sequentially in ascending index order so that repeated
//! evaluations are bit-identical.

use super::Scalar;

/// Strided read-only matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let view = Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        view.check_bounds(data.len());
        view
    }

    /// Dense row-major `rows × cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols, 1)
    }

    /// Transposed view of a dense row-major `rows × cols` matrix.
    pub fn dense_t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, cols, rows, 1, cols)
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check_bounds(&self, len: usize) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < len, "matrix view out of bounds ({last} >= {len})");
        }
    }
}

/// Strided mutable matrix view.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = offset + (rows - 1) * rs + cols - 1;
            assert!(last < data.len(), "matrix view out of bounds ({last} >= {})", data.len());
        }
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols)
    }
}

/// `c = a·b + (accumulate ? c : 0)`.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: MatMut<'_, T>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output extent");
    let beta = if accumulate { T::one() } else { T::zero() };
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        if !accumulate {
            for i in 0..c.rows {
                let start = c.offset + i * c.rs;
                c.data[start..start + c.cols].fill(T::zero());
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked at construction and `c`
    // holds the only mutable borrow of its buffer.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

const LANES: usize = 8;

/// Maximum ignoring NaNs (`-inf` for an empty or all-NaN row). Independent
/// lanes let the loop vectorize.
fn row_max<T: Scalar>(row: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for j in 0..LANES {
            acc[j] = if c[j] > acc[j] { c[j] } else { acc[j] };
        }
    }
    for &x in chunks.remainder() {
        acc[0] = if x > acc[0] { x } else { acc[0] };
    }
    acc.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m })
}

fn row_sum<T: Scalar>(row: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for j in 0..LANES {
            acc[j] += c[j];
        }
    }
    for &x in chunks.remainder() {
        acc[0] += x;
    }
    acc.iter().fold(T::zero(), |s, &x| s + x)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    softmax_scaled_in_place(row, T::one());
}

/// `softmax(scale · row)` for `scale > 0`.
pub fn softmax_scaled_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let max = row_max(row);
    for x in row.iter_mut() {
        *x = ((*x - max) * scale).exp_k();
    }
    let inv = row_sum(row).recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row_max(row);
    let mut sum = T::zero();
    for &x in row {
        sum += (x - max).exp_k();
    }
    max + sum.ln()
}

/// Layer norm over rows of width `d`. Writes per-row mean and reciprocal std.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let d = gain.len();
    let inv_d = T::of(1.0 / d as f64);
    for (r, (xr, yr)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mut mu = T::zero();
        for &v in xr {
            mu += v;
        }
        mu *= inv_d;
        let mut var = T::zero();
        for &v in xr {
            let c = v - mu;
            var += c * c;
        }
        var *= inv_d;
        let rs = (var + eps).sqrt().recip();
        for i in 0..d {
            yr[i] = (xr[i] - mu) * rs * gain[i] + bias[i];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    g: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let d = gain.len();
    let inv_d = T::of(1.0 / d as f64);
    let mut xhat = vec![T::zero(); d];
    for (r, ((xr, gr), dxr)) in x
        .chunks_exact(d)
        .zip(g.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mu) * rs;
            let dxh = gr[i] * gain[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[i];
            dgain[i] += gr[i] * xhat[i];
            dbias[i] += gr[i];
        }
        let m1 = sum_dxhat * inv_d;
        let m2 = sum_dxhat_xhat * inv_d;
        for i in 0..d {
            dxr[i] = rs * (gr[i] * gain[i] - m1 - xhat[i] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU, evaluated as `x·σ(2u)` since
/// `(1 + tanh u)/2 = σ(2u)`; `exp` is much cheaper than `tanh`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u2 = T::of(2.0 * GELU_C) * (x + T::of(GELU_A) * x * x * x);
    x / (T::one() + (-u2).exp_k())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u2 = T::of(2.0 * GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let s = (T::one() + (-u2).exp_k()).recip();
    s + x * s * (T::one() - s) * T::of(2.0 * GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x)
}

/// Shape bookkeeping for fused multi-head causal attention over `[batch·seq, d]`
/// row blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::of(1.0 / (self.head_dim() as f64).sqrt())
    }

    fn block(&self, b: usize, h: usize) -> usize {
        b * self.seq * self.d_model + h * self.head_dim()
    }
}

/// Causal scaled dot-product attention. `probs` receives `[batch, heads, seq, seq]`
/// row-stochastic weights with an exactly-zero upper triangle.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    out: &mut [T],
    probs: &mut [T],
) {
    let (t, d, dh) = (dims.seq, dims.d_model, dims.head_dim());
    let scale = dims.scale::<T>();
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let off = dims.block(b, h);
            let p = &mut probs[(b * dims.heads + h) * t * t..][..t * t];
            // Query rows [i0, i1) only see keys [0, i1).
            for (i0, i1) in causal_blocks(t) {
                gemm(
                    MatRef::new(q, off + i0 * d, i1 - i0, dh, d, 1),
                    MatRef::new(k, off, dh, i1, 1, d),
                    MatMut::new(p, i0 * t, i1 - i0, i1, t),
                    false,
                );
            }
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                softmax_scaled_in_place(&mut row[..=i], scale);
                row[i + 1..].fill(T::zero());
            }
            for (i0, i1) in causal_blocks(t) {
                gemm(
                    MatRef::new(p, i0 * t, i1 - i0, i1, t, 1),
                    MatRef::new(v, off, i1, dh, d, 1),
                    MatMut::new(out, off + i0 * d, i1 - i0, dh, d),
                    false,
                );
            }
        }
    }
}

const CAUSAL_BLOCK: usize = 64;

/// Row blocks `[i0, i1)` of a `t`-long causal sequence.
fn causal_blocks(t: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..t).step_by(CAUSAL_BLOCK).map(move |i0| (i0, (i0 + CAUSAL_BLOCK).min(t)))
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    dims: AttnDims,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (t, d, dh) = (dims.seq, dims.d_model, dims.head_dim());
    let scale = dims.scale::<T>();
    let mut dp = vec![T::zero(); t * t];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let off = dims.block(b, h);
            let p = &probs[(b * dims.heads + h) * t * t..][..t * t];
            for (i0, i1) in causal_blocks(t) {
                // dP = dO · Vᵀ
                gemm(
                    MatRef::new(g, off + i0 * d, i1 - i0, dh, d, 1),
                    MatRef::new(v, off, dh, i1, 1, d),
                    MatMut::new(&mut dp, i0 * t, i1 - i0, i1, t),
                    false,
                );
                // dV = Pᵀ · dO; key rows [i0, i1) get weight only from queries [i0, t).
                gemm(
                    MatRef::new(p, i0 * t + i0, i1 - i0, t - i0, 1, t),
                    MatRef::new(g, off + i0 * d, t - i0, dh, d, 1),
                    MatMut::new(dv, off + i0 * d, i1 - i0, dh, d),
                    false,
                );
            }
            // dS = P ∘ (dP − rowsum(P ∘ dP)), folded with the score scale.
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let mut dot = T::zero();
                for j in 0..=i {
                    dot += pr[j] * dr[j];
                }
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                dr[i + 1..].fill(T::zero());
            }
            for (i0, i1) in causal_blocks(t) {
                gemm(
                    MatRef::new(&dp, i0 * t, i1 - i0, i1, t, 1),
                    MatRef::new(k, off, i1, dh, d, 1),
                    MatMut::new(dq, off + i0 * d, i1 - i0, dh, d),
                    false,
                );
                gemm(
                    MatRef::new(&dp, i0 * t + i0, i1 - i0, t - i0, 1, t),
                    MatRef::new(q, off + i0 * d, t - i0, dh, d, 1),
                    MatMut::new(dk, off + i0 * d, i1 - i0, dh, d),
                    false,
                );
            }
        }
    }
}

/// Single-query attention against `len` cached key/value rows of width `d`.
pub fn attend_cached<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    len: usize,
    heads: usize,
    out: &mut [T],
) {
    let d = q.len();
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut scores = vec![T::zero(); len];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            let mut dot = T::zero();
            for (a, b) in qh.iter().zip(kh) {
                dot += *a * *b;
            }
            *s = dot;
        }
        softmax_scaled_in_place(&mut scores, scale);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.fill(T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, &x) in oh.iter_mut().zip(vh) {
                *o += p * x;
            }
        }
    }
}

/// `out = x·w` for a single row `x` and dense `w` of shape `[x.len(), out.len()]`.
pub fn vec_mat<T: Scalar>(x: &[T], w: &[T], out: &mut [T]) {
    let n = out.len();
    gemm(
        MatRef::dense(x, 1, x.len()),
        MatRef::dense(w, x.len(), n),
        MatMut::dense(out, 1, n),
        false,
    );
}
