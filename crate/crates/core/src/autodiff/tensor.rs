//! Dense row-major `f64` tensors and the raw kernels the tape is built on.
//!
//! Kernels here never allocate gradient state; they are shared by the taped
//! operations and by the plain (untaped) reference paths so that both produce
//! the same floating-point results operation for operation.

use std::fmt;

use crate::error::TensorError;

/// Dense tensor value: a shape and a flat row-major buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panicking constructor for literals in tests and internal code paths
    /// where the length is known to match.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        Self::new(shape, data).expect("tensor data length does not match shape")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major 2-D transpose.
    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// `C[M×N] = A[M×K] · B[K×N]`, accumulated in `k` order for every output.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::MatmulShape {
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Accumulates `a[m×k] · b[k×n]` into `out[m×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Accumulates `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`, into `out[m×n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Accumulates `a · bᵀ` where `a` is `[m×k]` and `b` is `[n×k]`, into `out[m×n]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax of one contiguous row, written into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax along `axis` with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    let (outer, extent, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![0.0; x.data.len()];
    if inner == 1 {
        for o in 0..outer {
            let span = o * extent..(o + 1) * extent;
            softmax_row(&x.data[span.clone()], &mut out[span]);
        }
    } else {
        let mut buf_in = vec![0.0; extent];
        let mut buf_out = vec![0.0; extent];
        for o in 0..outer {
            for i in 0..inner {
                for e in 0..extent {
                    buf_in[e] = x.data[(o * extent + e) * inner + i];
                }
                softmax_row(&buf_in, &mut buf_out);
                for e in 0..extent {
                    out[(o * extent + e) * inner + i] = buf_out[e];
                }
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Per-row statistics kept by layer norm for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormStats {
    /// Normalised input, before the affine transform.
    pub xhat: Vec<f64>,
    /// `1 / sqrt(var + eps)` per row.
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormStats), TensorError> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(TensorError::Broadcast {
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain.data[c] + bias.data[c];
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        LayerNormStats { xhat, rstd },
    ))
}

/// Layer normalisation over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    layer_norm_forward(x, gain, bias, eps).map(|(t, _)| t)
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let inner = GELU_C * (x + GELU_K * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + GELU_K * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// Adds a `[N]` bias to every row of an `[M×N]` matrix.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let n = x.cols();
    if bias.len() != n {
        return Err(TensorError::Broadcast {
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// `x · w + b`, the affine map used by every linear layer.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    add_row(&matmul(x, w)?, b)
}

/// Row-wise L2 normalisation with a norm floor.
pub fn normalize_rows(x: &Tensor, floor: f64) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Concatenates 2-D tensors along the row axis.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let cols = parts.first().map(|t| t.cols()).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != cols {
            return Err(TensorError::Concat {
                shapes: parts.iter().map(|t| t.shape.clone()).collect(),
            });
        }
        rows += r;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![rows, cols],
        data,
    })
}

/// Geometry of one multi-head attention call over a batch of token sequences.
///
/// Queries come only from the `tokens` rows of each sample; keys and values
/// are the sample's own tokens followed by `extra` rows (prompts). Extra rows
/// are either shared by the whole batch or given per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub tokens: usize,
    pub extra: usize,
    pub extra_shared: bool,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn keys(&self) -> usize {
        self.tokens + self.extra
    }

    fn extra_row(&self, b: usize, j: usize) -> usize {
        if self.extra_shared {
            j
        } else {
            b * self.extra + j
        }
    }
}

/// Multi-head attention forward. Returns the output `[batch·tokens × d]` and the
/// attention probabilities laid out as `[batch][head][tokens][keys]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ek: &[f64],
    ev: &[f64],
    d: usize,
    layout: AttentionLayout,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionLayout {
        batch,
        tokens,
        heads,
        ..
    } = layout;
    let dh = d / heads;
    let nk = layout.keys();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * tokens * d];
    let mut probs = vec![0.0; batch * heads * tokens * nk];
    let mut scores = vec![0.0; nk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tokens {
                let qrow = &q[(b * tokens + i) * d + off..(b * tokens + i) * d + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = if j < tokens {
                        &k[(b * tokens + j) * d + off..(b * tokens + j) * d + off + dh]
                    } else {
                        let r = layout.extra_row(b, j - tokens);
                        &ek[r * d + off..r * d + off + dh]
                    };
                    let mut acc = 0.0;
                    for (x, y) in qrow.iter().zip(krow) {
                        acc += x * y;
                    }
                    *s = acc * scale;
                }
                let base = ((b * heads + h) * tokens + i) * nk;
                let prow = &mut probs[base..base + nk];
                softmax_row(&scores, prow);
                let orow = &mut out[(b * tokens + i) * d + off..(b * tokens + i) * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = if j < tokens {
                        &v[(b * tokens + j) * d + off..(b * tokens + j) * d + off + dh]
                    } else {
                        let r = layout.extra_row(b, j - tokens);
                        &ev[r * d + off..r * d + off + dh]
                    };
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of attention with respect to (q, k, v, extra k, extra v).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ek: &[f64],
    ev: &[f64],
    probs: &[f64],
    d: usize,
    layout: AttentionLayout,
) -> [Vec<f64>; 5] {
    let AttentionLayout {
        batch,
        tokens,
        heads,
        ..
    } = layout;
    let dh = d / heads;
    let nk = layout.keys();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dek = vec![0.0; ek.len()];
    let mut dev = vec![0.0; ev.len()];
    let mut dp = vec![0.0; nk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tokens {
                let qi = (b * tokens + i) * d + off;
                let go = &dout[qi..qi + dh];
                let base = ((b * heads + h) * tokens + i) * nk;
                let prow = &probs[base..base + nk];
                // dP and dV
                for j in 0..nk {
                    let (vrow, dvrow) = if j < tokens {
                        let r = (b * tokens + j) * d + off;
                        (&v[r..r + dh], &mut dv[r..r + dh])
                    } else {
                        let r = layout.extra_row(b, j - tokens) * d + off;
                        (&ev[r..r + dh], &mut dev[r..r + dh])
                    };
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += go[c] * vrow[c];
                        dvrow[c] += prow[j] * go[c];
                    }
                    dp[j] = acc;
                }
                let dot: f64 = dp.iter().zip(prow).map(|(a, p)| a * p).sum();
                for j in 0..nk {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (krow, dkrow) = if j < tokens {
                        let r = (b * tokens + j) * d + off;
                        (&k[r..r + dh], &mut dk[r..r + dh])
                    } else {
                        let r = layout.extra_row(b, j - tokens) * d + off;
                        (&ek[r..r + dh], &mut dek[r..r + dh])
                    };
                    for c in 0..dh {
                        dq[qi + c] += ds * krow[c];
                        dkrow[c] += ds * q[qi + c];
                    }
                }
            }
        }
    }
    [dq, dk, dv, dek, dev]
}
