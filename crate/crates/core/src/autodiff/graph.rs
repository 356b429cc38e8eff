//! Eager computation graph with an optional reverse-mode tape.
//!
//! Every op computes its value immediately. With taping enabled the op is
//! also recorded together with its input node ids, which is all the backward
//! rules need because node values stay cached in the graph. Node ids are
//! assigned in creation order, so that order is already topological.
//!
//! Broadcasting for the binary elementwise ops (`add`, `sub`, `mul`, `div`,
//! `atan2`): the two shapes must be equal, or one operand must hold a single
//! element, or one shape must be a strict suffix of the other (a bias of
//! shape `[n]` against `[m, n]`, a mask `[L, 3]` against `[B, T, L, 3]`).
//! The output takes the larger shape.

use std::collections::BTreeMap;

use crate::autodiff::kernels;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Full,
    Suffix(usize),
    One,
}

impl Bcast {
    #[inline]
    fn idx(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Suffix(m) => i % m,
            Bcast::One => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Param,
    Const,
    MatMul(usize, usize),
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        ba: Bcast,
        bb: Bcast,
    },
    Unary(Unary, usize),
    Scale(usize, S),
    Clamp {
        x: usize,
        lo: S,
        hi: S,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Reduce {
        x: usize,
        axis: Option<usize>,
        mean: bool,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    LstmCell {
        gates: usize,
        cell: usize,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Param | Op::Const => Vec::new(),
            Op::MatMul(a, b) => vec![*a, *b],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::Clamp { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::Reduce { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::LstmCell { gates, cell } => vec![*gates, *cell],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (laid out as `shape`) into the permuted layout.
fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: BTreeMap<NodeId, Tensor<S>>,
    rule_applications: usize,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a parameter leaf; leaves the root does not depend on get zeros.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    /// Number of nodes whose backward rule ran during this traversal.
    pub fn rule_applications(&self) -> usize {
        self.rule_applications
    }
}

/// A computation graph. Single-threaded; independent graphs may be built in
/// parallel from shared parameter tensors.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    taping: bool,
    track_branches: bool,
    branch_hash: u64,
    at_kink: bool,
}

impl<S: Scalar> Graph<S> {
    pub fn new(taping: bool) -> Self {
        Self {
            nodes: Vec::new(),
            taping,
            track_branches: false,
            branch_hash: 0xcbf2_9ce4_8422_2325,
            at_kink: false,
        }
    }

    pub fn taping(&self) -> bool {
        self.taping
    }

    /// Record which side of every non-differentiable point (clamp bounds,
    /// zero for `abs`/`sqrt`, the origin for `atan2`) each element falls on.
    /// Used by gradient checking to exclude finite differences that straddle
    /// a kink.
    pub fn track_branches(&mut self, on: bool) {
        self.track_branches = on;
    }

    /// Hash of all branch decisions taken so far (when tracking is on).
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// True if some element sat exactly on a non-differentiable point.
    pub fn hit_kink(&self) -> bool {
        self.at_kink
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        let requires_grad = self.taping;
        self.push_raw(value, Op::Param, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_raw(value, Op::Const, false)
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.taping && op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn note_branch(&mut self, side: u8) {
        self.branch_hash = (self.branch_hash ^ u64::from(side)).wrapping_mul(0x0000_0100_0000_01B3);
    }

    fn broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Full, Bcast::Full));
        }
        if lb == 1 {
            return Ok((sa.to_vec(), Bcast::Full, Bcast::One));
        }
        if la == 1 {
            return Ok((sb.to_vec(), Bcast::One, Bcast::Full));
        }
        if sb.len() < sa.len() && sa.ends_with(sb) {
            return Ok((sa.to_vec(), Bcast::Full, Bcast::Suffix(lb)));
        }
        if sa.len() < sb.len() && sb.ends_with(sa) {
            return Ok((sb.to_vec(), Bcast::Suffix(la), Bcast::Full));
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Atan2 => "atan2",
        };
        let (shape, ba, bb) = self.broadcast(name, a, b)?;
        let n: usize = shape.iter().product();
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let f: fn(S, S) -> S = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Atan2 => |y, x| y.atan2(x),
        };
        let out: Vec<S> = match (ba, bb) {
            (Bcast::Full, Bcast::Full) => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(xa[ba.idx(i)], xb[bb.idx(i)])).collect(),
        };
        if self.track_branches {
            if let Binary::Atan2 = kind {
                let mut origin = false;
                for i in 0..n {
                    if xa[ba.idx(i)] == S::zero() && xb[bb.idx(i)] == S::zero() {
                        origin = true;
                    }
                }
                self.at_kink |= origin;
            }
        }
        self.push(
            name,
            Tensor::from_parts(shape, out),
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                ba,
                bb,
            },
        )
    }

    /// Elementwise sum, with suffix broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product, with suffix broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    /// Four-quadrant arctangent of `y / x`. The gradient at the origin is
    /// taken as zero.
    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> Result<NodeId> {
        self.binary(Binary::Atan2, y, x)
    }

    fn unary(&mut self, kind: Unary, x: NodeId) -> Result<NodeId> {
        let (name, f): (&'static str, fn(S) -> S) = match kind {
            Unary::Sigmoid => ("sigmoid", sigmoid),
            Unary::Tanh => ("tanh", |v| v.tanh()),
            Unary::Exp => ("exp", |v| v.exp()),
            Unary::Log => ("log", |v| v.ln()),
            Unary::Square => ("square", |v| v * v),
            Unary::Sqrt => ("sqrt", |v| v.sqrt()),
            Unary::Abs => ("abs", |v| v.abs()),
        };
        let value = self.value(x).map(f);
        if self.track_branches && matches!(kind, Unary::Sqrt | Unary::Abs) {
            let mut kink = false;
            let mut signs = Vec::new();
            for &v in self.value(x).data() {
                kink |= v == S::zero();
                signs.push(u8::from(v > S::zero()));
            }
            self.at_kink |= kink;
            for s in signs {
                self.note_branch(s);
            }
        }
        self.push(name, value, Op::Unary(kind, x.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, x)
    }

    /// Natural logarithm; non-positive inputs are a hard error.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Square, x)
    }

    /// Square root. The gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sqrt, x)
    }

    /// Absolute value, with gradient zero at zero.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Abs, x)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x.0, factor))
    }

    /// Clamp into `[lo, hi]`. The backward rule passes the gradient through
    /// where `lo <= x <= hi` (bounds count as inside) and blocks it elsewhere.
    pub fn clamp(&mut self, x: NodeId, lo: S, hi: S) -> Result<NodeId> {
        if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
            return Err(Error::invalid(
                "clamp",
                format!("lower bound {lo} above upper bound {hi}"),
            ));
        }
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        if self.track_branches {
            let mut sides = Vec::with_capacity(value.len());
            let mut kink = false;
            for &v in self.value(x).data() {
                kink |= v == lo || v == hi;
                sides.push(if v < lo {
                    0
                } else if v > hi {
                    2
                } else {
                    1
                });
            }
            self.at_kink |= kink;
            for s in sides {
                self.note_branch(s);
            }
        }
        self.push("clamp", value, Op::Clamp { x: x.0, lo, hi })
    }

    /// `[m, k] x [k, n] -> [m, n]`; both operands must be rank 2.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0))
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        self.push(
            "slice",
            Tensor::from_parts(out_shape, out),
            Op::Slice { x: x.0, axis, start },
        )
    }

    /// Select `indices` (repeats allowed) along `axis`.
    pub fn gather(&mut self, x: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        self.check_axis("gather", x, axis)?;
        let shape = self.shape(x).to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::invalid(
                "gather",
                format!("indices {indices:?} invalid for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.push(
            "gather",
            Tensor::from_parts(out_shape, out),
            Op::Gather {
                x: x.0,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base_shape = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let src = self.value(x).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                xs: xs.iter().map(|x| x.0).collect(),
                axis,
            },
        )
    }

    fn reduce(&mut self, x: NodeId, axis: Option<usize>, mean: bool) -> Result<NodeId> {
        let name = if mean { "reduce_mean" } else { "reduce_sum" };
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let value = match axis {
            None => {
                let mut acc = S::zero();
                for &v in src {
                    acc += v;
                }
                if mean {
                    acc /= S::of_usize(src.len());
                }
                Tensor::scalar(acc)
            }
            Some(axis) => {
                self.check_axis(name, x, axis)?;
                let (outer, len, inner) = axis_extents(&shape, axis);
                let mut out = vec![S::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    let d = S::of_usize(len);
                    out.iter_mut().for_each(|v| *v /= d);
                }
                let mut out_shape = shape;
                out_shape.remove(axis);
                Tensor::from_parts(out_shape, out)
            }
        };
        self.push(name, value, Op::Reduce { x: x.0, axis, mean })
    }

    /// Sum over `axis` (dropping it), or over everything when `None`.
    pub fn reduce_sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(x, axis, true)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|_| Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            })?;
        self.push("reshape", value, Op::Reshape(x.0))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {shape:?}"),
            ));
        }
        let (out_shape, out) = permute_data(self.value(x).data(), &shape, perm);
        self.push(
            "permute",
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
        )
    }

    /// One LSTM step from pre-activations `gates` `[B, 4H]` (ordered input,
    /// forget, candidate, output) and the previous cell `[B, H]`. Returns
    /// `[B, 2H]`: the new hidden state followed by the new cell state.
    pub fn lstm_cell(&mut self, gates: NodeId, cell: NodeId) -> Result<NodeId> {
        let (sg, sc) = (self.shape(gates), self.shape(cell));
        if sg.len() != 2 || sc.len() != 2 || sg[0] != sc[0] || sg[1] != 4 * sc[1] {
            return Err(Error::ShapeMismatch {
                op: "lstm_cell",
                lhs: sg.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        let (b, h) = (sc[0], sc[1]);
        let a = self.value(gates).data();
        let c_prev = self.value(cell).data();
        let mut out = vec![S::zero(); b * 2 * h];
        for r in 0..b {
            for j in 0..h {
                let base = r * 4 * h;
                let i = sigmoid(a[base + j]);
                let f = sigmoid(a[base + h + j]);
                let gg = a[base + 2 * h + j].tanh();
                let o = sigmoid(a[base + 3 * h + j]);
                let c = f * c_prev[r * h + j] + i * gg;
                out[r * 2 * h + j] = o * c.tanh();
                out[r * 2 * h + h + j] = c;
            }
        }
        self.push(
            "lstm_cell",
            Tensor::from_parts(vec![b, 2 * h], out),
            Op::LstmCell {
                gates: gates.0,
                cell: cell.0,
            },
        )
    }

    /// Reverse sweep from a scalar root. May be called any number of times;
    /// each call recomputes the same gradients from the cached values.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if !self.taping {
            return Err(Error::TapingDisabled);
        }
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        let mut grads = BTreeMap::new();
        let mut applications = 0;
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(vec![S::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            applications += 1;
            let node = &self.nodes[i];
            match &node.op {
                Op::Param => {
                    grads.insert(NodeId(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Const => {}
                op => self.apply_rule(op, &node.value, g, &mut adj),
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && node.requires_grad {
                grads.entry(NodeId(i)).or_insert_with(|| {
                    Tensor::from_parts(node.value.shape().to_vec(), vec![S::zero(); node.value.len()])
                });
            }
        }
        Ok(Gradients {
            grads,
            rule_applications: applications,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Vec<S>>], target: usize, contribution: Vec<S>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut adj[target] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Add into the adjoint of `target` in place, allocating zeros first if
    /// it has none yet.
    fn accumulate_with(&self, adj: &mut [Option<Vec<S>>], target: usize, f: impl FnOnce(&mut [S])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let n = self.nodes[target].value.len();
        f(adj[target].get_or_insert_with(|| vec![S::zero(); n]));
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn apply_rule(&self, op: &Op<S>, out: &Tensor<S>, g: Vec<S>, adj: &mut [Option<Vec<S>>]) {
        match op {
            Op::Param | Op::Const => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let da = kernels::matmul_bt(&g, vb.data(), m, k, n);
                    self.accumulate(adj, *a, da);
                }
                if self.wants(*b) {
                    let db = kernels::matmul_at(va.data(), &g, m, k, n);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Binary { kind, a, b, ba, bb } => {
                let xa = self.nodes[*a].value.data();
                let xb = self.nodes[*b].value.data();
                let (la, lb) = (xa.len(), xb.len());
                let mut ga = self.wants(*a).then(|| vec![S::zero(); la]);
                let mut gb = self.wants(*b).then(|| vec![S::zero(); lb]);
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (ba.idx(i), bb.idx(i));
                    let (x, y) = (xa[ia], xb[ib]);
                    let (da, db) = match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * y, gi * x),
                        Binary::Div => (gi / y, -gi * x / (y * y)),
                        Binary::Atan2 => {
                            // x holds the numerator y, y holds the denominator x
                            let r2 = x * x + y * y;
                            if r2 == S::zero() {
                                (S::zero(), S::zero())
                            } else {
                                (gi * y / r2, -gi * x / r2)
                            }
                        }
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                }
                if let Some(ga) = ga {
                    self.accumulate(adj, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.nodes[*x].value.data();
                let yv = out.data();
                let two = S::of(2.0);
                let dx: Vec<S> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let d = match kind {
                            Unary::Sigmoid => yv[i] * (S::one() - yv[i]),
                            Unary::Tanh => S::one() - yv[i] * yv[i],
                            Unary::Exp => yv[i],
                            Unary::Log => S::one() / xv[i],
                            Unary::Square => two * xv[i],
                            Unary::Sqrt => {
                                if yv[i] == S::zero() {
                                    S::zero()
                                } else {
                                    S::one() / (two * yv[i])
                                }
                            }
                            Unary::Abs => {
                                if xv[i] > S::zero() {
                                    S::one()
                                } else if xv[i] < S::zero() {
                                    -S::one()
                                } else {
                                    S::zero()
                                }
                            }
                        };
                        gi * d
                    })
                    .collect();
                self.accumulate(adj, *x, dx);
            }
            Op::Scale(x, c) => {
                let dx = g.into_iter().map(|gi| gi * *c).collect();
                self.accumulate(adj, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[*x].value.data();
                let dx = g
                    .into_iter()
                    .zip(xv)
                    .map(|(gi, &v)| if v >= *lo && v <= *hi { gi } else { S::zero() })
                    .collect();
                self.accumulate(adj, *x, dx);
            }
            Op::Slice { x, axis, start } => {
                let shape = self.nodes[*x].value.shape();
                let (outer, len, inner) = axis_extents(shape, *axis);
                let width = out.shape()[*axis];
                self.accumulate_with(adj, *x, |dx| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        for (d, &v) in dx[dst..dst + width * inner]
                            .iter_mut()
                            .zip(&g[src..src + width * inner])
                        {
                            *d += v;
                        }
                    }
                });
            }
            Op::Gather { x, axis, indices } => {
                let shape = self.nodes[*x].value.shape();
                let (outer, len, inner) = axis_extents(shape, *axis);
                let mut dx = vec![S::zero(); outer * len * inner];
                let mut src = 0;
                for o in 0..outer {
                    for &i in indices {
                        let dst = (o * len + i) * inner;
                        for (d, &gv) in dx[dst..dst + inner].iter_mut().zip(&g[src..src + inner]) {
                            *d += gv;
                        }
                        src += inner;
                    }
                }
                self.accumulate(adj, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.nodes[x].value.shape()[*axis];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(adj, x, dx);
                    }
                    offset += len;
                }
            }
            Op::Reduce { x, axis, mean } => {
                let shape = self.nodes[*x].value.shape();
                let n: usize = shape.iter().product();
                let dx = match axis {
                    None => {
                        let mut gv = g[0];
                        if *mean {
                            gv /= S::of_usize(n);
                        }
                        vec![gv; n]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_extents(shape, *axis);
                        let scale = if *mean { S::one() / S::of_usize(len) } else { S::one() };
                        let mut dx = Vec::with_capacity(n);
                        for o in 0..outer {
                            for _ in 0..len {
                                dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                            }
                        }
                        dx
                    }
                };
                self.accumulate(adj, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(adj, *x, g),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, dx) = permute_data(&g, out.shape(), &inverse);
                self.accumulate(adj, *x, dx);
            }
            Op::LstmCell { gates, cell } => {
                let a = self.nodes[*gates].value.data();
                let c_prev = self.nodes[*cell].value.data();
                let h = self.nodes[*cell].value.shape()[1];
                let b = c_prev.len() / h;
                let mut da = vec![S::zero(); a.len()];
                let mut dc_prev = vec![S::zero(); c_prev.len()];
                let one = S::one();
                for r in 0..b {
                    for j in 0..h {
                        let base = r * 4 * h;
                        let i = sigmoid(a[base + j]);
                        let f = sigmoid(a[base + h + j]);
                        let gg = a[base + 2 * h + j].tanh();
                        let o = sigmoid(a[base + 3 * h + j]);
                        let c = out.data()[r * 2 * h + h + j];
                        let tc = c.tanh();
                        let gh = g[r * 2 * h + j];
                        let dc = g[r * 2 * h + h + j] + gh * o * (one - tc * tc);
                        da[base + j] = dc * gg * i * (one - i);
                        da[base + h + j] = dc * c_prev[r * h + j] * f * (one - f);
                        da[base + 2 * h + j] = dc * i * (one - gg * gg);
                        da[base + 3 * h + j] = gh * tc * o * (one - o);
                        dc_prev[r * h + j] = dc * f;
                    }
                }
                if self.wants(*gates) {
                    self.accumulate(adj, *gates, da);
                }
                if self.wants(*cell) {
                    self.accumulate(adj, *cell, dc_prev);
                }
            }
        }
    }
}
