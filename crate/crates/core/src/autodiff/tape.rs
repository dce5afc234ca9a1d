//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! record once in reverse. Leaves created with [`Tape::constant`] never carry
//! gradient, and neither does anything computed only from constants.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{self, Activation, AttentionLayout, LayerNormStats, Tensor};
use crate::error::TensorError;

pub type NodeId = usize;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Affine(NodeId, f64),
    Transpose(NodeId),
    Reshape(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: LayerNormStats,
    },
    Act(NodeId, Activation),
    Sum(NodeId),
    Mean(NodeId),
    LnFloor(NodeId, f64),
    Powf(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    Narrow {
        x: NodeId,
        offset: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
        floor: f64,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        extra: Option<(NodeId, NodeId)>,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_flag(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Frozen leaf; never appears in the gradient map.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, contribution: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_with(
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    id: NodeId,
    f: impl FnOnce(&Tensor) -> Tensor,
) {
    if nodes[id].requires_grad {
        let contribution = f(&nodes[id].value);
        accumulate(grads, nodes, id, contribution);
    }
}

fn propagate(nodes: &[Node], id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                tensor::matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                accumulate(grads, nodes, *a, Tensor::from_vec([m, k], da));
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; k * n];
                tensor::matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                accumulate(grads, nodes, *b, Tensor::from_vec([k, n], db));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate_with(grads, nodes, a, |_| {
                let bv = &nodes[b].value;
                Tensor::from_vec(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                )
            });
            accumulate_with(grads, nodes, b, |_| {
                let av = &nodes[a].value;
                Tensor::from_vec(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                )
            });
        }
        Op::AddRow(x, bias) => {
            accumulate(grads, nodes, *x, g.clone());
            accumulate_with(grads, nodes, *bias, |bv| {
                let n = g.cols();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::from_vec(bv.shape().to_vec(), db)
            });
        }
        Op::Affine(x, scale) => {
            accumulate(grads, nodes, *x, g.map(|v| v * scale));
        }
        Op::Transpose(x) => {
            accumulate_with(grads, nodes, *x, |_| g.transpose().expect("rank-2 gradient"));
        }
        Op::Reshape(x) => {
            accumulate_with(grads, nodes, *x, |xv| {
                g.clone().reshape(xv.shape().to_vec()).expect("reshape gradient")
            });
        }
        Op::Softmax { x, axis } => {
            accumulate_with(grads, nodes, *x, |_| softmax_backward(out, g, *axis));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let gv = &nodes[*gain].value;
            let d = gv.len();
            if nodes[*gain].requires_grad {
                let mut dg = vec![0.0; d];
                for (grow, hrow) in g.data().chunks(d).zip(stats.xhat.chunks(d)) {
                    for c in 0..d {
                        dg[c] += grow[c] * hrow[c];
                    }
                }
                accumulate(grads, nodes, *gain, Tensor::from_vec(gv.shape().to_vec(), dg));
            }
            accumulate_with(grads, nodes, *bias, |bv| {
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_vec(bv.shape().to_vec(), db)
            });
            accumulate_with(grads, nodes, *x, |xv| {
                let mut dx = vec![0.0; xv.len()];
                let inv_d = 1.0 / d as f64;
                for (r, ((grow, hrow), dxrow)) in g
                    .data()
                    .chunks(d)
                    .zip(stats.xhat.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = grow[c] * gv.data()[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[c];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    let rstd = stats.rstd[r];
                    for c in 0..d {
                        let dh = grow[c] * gv.data()[c];
                        dxrow[c] = rstd * (dh - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
                Tensor::from_vec(xv.shape().to_vec(), dx)
            });
        }
        Op::Act(x, kind) => {
            accumulate_with(grads, nodes, *x, |xv| {
                Tensor::from_vec(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| gv * kind.derivative(v))
                        .collect(),
                )
            });
        }
        Op::Sum(x) => {
            let gv = g.item();
            accumulate_with(grads, nodes, *x, |xv| Tensor::full(xv.shape().to_vec(), gv));
        }
        Op::Mean(x) => {
            let gv = g.item();
            accumulate_with(grads, nodes, *x, |xv| {
                Tensor::full(xv.shape().to_vec(), gv / xv.len() as f64)
            });
        }
        Op::LnFloor(x, floor) => {
            accumulate_with(grads, nodes, *x, |xv| {
                Tensor::from_vec(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > *floor { gv / v } else { 0.0 })
                        .collect(),
                )
            });
        }
        Op::Powf(x, p) => {
            let p = *p;
            accumulate_with(grads, nodes, *x, |xv| {
                Tensor::from_vec(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if p == 0.0 { 0.0 } else { gv * p * v.powf(p - 1.0) })
                        .collect(),
                )
            });
        }
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut row = 0;
            for &p in parts {
                let pr = nodes[p].value.shape()[0];
                if nodes[p].requires_grad {
                    let slice = g.data()[row * cols..(row + pr) * cols].to_vec();
                    accumulate(grads, nodes, p, Tensor::from_vec([pr, cols], slice));
                }
                row += pr;
            }
        }
        Op::Narrow { x, offset } => {
            accumulate_with(grads, nodes, *x, |xv| {
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[*offset..*offset + g.len()].copy_from_slice(g.data());
                dx
            });
        }
        Op::SliceCols { x, start } => {
            accumulate_with(grads, nodes, *x, |xv| {
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let w = g.cols();
                let mut dx = Tensor::zeros([r, c]);
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                dx
            });
        }
        Op::NormalizeRows { x, norms, floor } => {
            accumulate_with(grads, nodes, *x, |xv| {
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let dst = &mut dx[r * d..(r + 1) * d];
                    if *norm > *floor {
                        let dot: f64 = grow.iter().zip(y).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dst[c] = (grow[c] - y[c] * dot) / norm;
                        }
                    } else {
                        for c in 0..d {
                            dst[c] = grow[c] / floor;
                        }
                    }
                }
                Tensor::from_vec(xv.shape().to_vec(), dx)
            });
        }
        Op::Attention {
            q,
            k,
            v,
            extra,
            layout,
            probs,
        } => {
            let empty = Tensor::zeros([0]);
            let (ek, ev) = match extra {
                Some((ek, ev)) => (&*nodes[*ek].value, &*nodes[*ev].value),
                None => (&empty, &empty),
            };
            let d = nodes[*q].value.cols();
            let [dq, dk, dv, dek, dev] = tensor::attention_backward(
                g.data(),
                nodes[*q].value.data(),
                nodes[*k].value.data(),
                nodes[*v].value.data(),
                ek.data(),
                ev.data(),
                probs,
                d,
                *layout,
            );
            let shaped = |id: NodeId, data: Vec<f64>| {
                Tensor::from_vec(nodes[id].value.shape().to_vec(), data)
            };
            accumulate(grads, nodes, *q, shaped(*q, dq));
            accumulate(grads, nodes, *k, shaped(*k, dk));
            accumulate(grads, nodes, *v, shaped(*v, dv));
            if let Some((ek, ev)) = extra {
                accumulate(grads, nodes, *ek, shaped(*ek, dek));
                accumulate(grads, nodes, *ev, shaped(*ev, dev));
            }
        }
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, extent, inner) =
        tensor::axis_split(y.shape(), axis).expect("axis validated in forward");
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * extent + e) * inner + i;
            let dot: f64 = (0..extent).map(|e| y.data()[idx(e)] * g.data()[idx(e)]).sum();
            for e in 0..extent {
                dx[idx(e)] = y.data()[idx(e)] * (g.data()[idx(e)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx)
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when none reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(id, g)| g.as_ref().map(|g| (id, g)))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Constant copy of this value; gradient does not flow through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, self.requires_grad(), op)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, rg, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    fn zip_with(
        &self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::Broadcast {
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Tensor::from_vec(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = self.zip_with(other, |x, y| x + y)?;
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = self.zip_with(other, |x, y| x - y)?;
        Ok(self.binary(other, value, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = self.zip_with(other, |x, y| x * y)?;
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = tensor::add_row(&self.value(), &bias.value())?;
        Ok(self.binary(bias, value, Op::AddRow(self.id, bias.id)))
    }

    /// `x·w + b`.
    pub fn linear(&self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.matmul(w)?.add_row(b)
    }

    /// `scale·x + offset`.
    pub fn affine(&self, scale: f64, offset: f64) -> Var<'t> {
        let value = self.value().map(|v| scale * v + offset);
        self.unary(value, Op::Affine(self.id, scale))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        let value = self.value().transpose()?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let value = tensor::softmax(&self.value(), axis)?;
        Ok(self.unary(value, Op::Softmax { x: self.id, axis }))
    }

    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>, TensorError> {
        let (value, stats) =
            tensor::layer_norm_forward(&self.value(), &gain.value(), &bias.value(), eps)?;
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
        ))
    }

    pub fn activation(&self, kind: Activation) -> Var<'t> {
        let value = tensor::activation(&self.value(), kind);
        self.unary(value, Op::Act(self.id, kind))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.unary(value, Op::Mean(self.id))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn ln_floor(&self, floor: f64) -> Var<'t> {
        let value = self.value().map(|v| v.max(floor).ln());
        self.unary(value, Op::LnFloor(self.id, floor))
    }

    /// `x^p` for nonnegative `x`. `p = 0` gives ones with zero gradient.
    pub fn powf(&self, p: f64) -> Var<'t> {
        let value = self
            .value()
            .map(|v| if p == 0.0 { 1.0 } else { v.max(0.0).powf(p) });
        self.unary(value, Op::Powf(self.id, p))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let tape = parts
            .first()
            .map(|p| p.tape)
            .ok_or(TensorError::Concat { shapes: vec![] })?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = tensor::concat_rows(&refs)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(value, rg, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Contiguous window of the flat buffer, viewed with `shape`.
    pub fn narrow(&self, offset: usize, shape: impl Into<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let v = self.value();
        if offset + n > v.len() {
            return Err(TensorError::Slice {
                start: offset,
                end: offset + n,
                extent: v.len(),
            });
        }
        let value = Tensor::from_vec(shape, v.data()[offset..offset + n].to_vec());
        Ok(self.unary(value, Op::Narrow { x: self.id, offset }))
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start > end || end > r {
            return Err(TensorError::Slice {
                start,
                end,
                extent: r,
            });
        }
        self.narrow(start * c, [end - start, c])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start > end || end > c {
            return Err(TensorError::Slice {
                start,
                end,
                extent: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&v.data()[i * c + start..i * c + end]);
        }
        Ok(self.unary(
            Tensor::from_vec([r, w], data),
            Op::SliceCols { x: self.id, start },
        ))
    }

    /// Row-wise L2 normalisation; rows with norm below `floor` are divided by `floor`.
    pub fn normalize_rows(&self, floor: f64) -> Var<'t> {
        let v = self.value();
        let d = v.cols();
        let norms: Vec<f64> = v
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = tensor::normalize_rows(&v, floor);
        self.unary(
            value,
            Op::NormalizeRows {
                x: self.id,
                norms,
                floor,
            },
        )
    }
}

/// Multi-head attention where queries come only from the token rows and
/// `extra` (keys, values) rows extend the key/value set.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    extra: Option<(Var<'t>, Var<'t>)>,
    layout: AttentionLayout,
) -> Result<Var<'t>, TensorError> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (rows, d) = qv.dims2()?;
    if kv.shape() != qv.shape() || vv.shape() != qv.shape() || rows != layout.batch * layout.tokens
    {
        return Err(TensorError::Broadcast {
            lhs: qv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        });
    }
    if layout.heads == 0 || d % layout.heads != 0 {
        return Err(TensorError::Broadcast {
            lhs: qv.shape().to_vec(),
            rhs: vec![layout.heads],
        });
    }
    let empty = Rc::new(Tensor::zeros([0]));
    let (ekv, evv) = match extra {
        Some((ek, ev)) => (ek.value(), ev.value()),
        None => (Rc::clone(&empty), Rc::clone(&empty)),
    };
    let expected_rows = match (extra, layout.extra_shared) {
        (None, _) => 0,
        (Some(_), true) => layout.extra,
        (Some(_), false) => layout.batch * layout.extra,
    };
    if extra.is_none() && layout.extra != 0 {
        return Err(TensorError::Broadcast {
            lhs: qv.shape().to_vec(),
            rhs: vec![layout.extra],
        });
    }
    if extra.is_some() && (ekv.len() != expected_rows * d || evv.shape() != ekv.shape()) {
        return Err(TensorError::Broadcast {
            lhs: qv.shape().to_vec(),
            rhs: ekv.shape().to_vec(),
        });
    }
    let (out, probs) =
        tensor::attention_forward(qv.data(), kv.data(), vv.data(), ekv.data(), evv.data(), d, layout);
    let rg = q.requires_grad()
        || k.requires_grad()
        || v.requires_grad()
        || extra.is_some_and(|(a, b)| a.requires_grad() || b.requires_grad());
    Ok(q.tape.push(
        Tensor::from_vec([rows, d], out),
        rg,
        Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            extra: extra.map(|(a, b)| (a.id, b.id)),
            layout,
            probs,
        },
    ))
}
