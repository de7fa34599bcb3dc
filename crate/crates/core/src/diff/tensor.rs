//! Define-by-run reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Tensor`]s. Calling
//! [`Tensor::backward`] on a scalar walks the record in reverse and
//! accumulates `∂out/∂leaf` into every leaf created with `requires_grad`.
//! Graphs are cheap; build a fresh one per training step.
//!
//! ```
//! use glrep::diff::Graph;
//!
//! let g = Graph::new();
//! let x = g.param(&[], vec![3.0]);
//! let y = x.square();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![6.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Gradients of leaves, keyed by node id.
pub type GradMap = BTreeMap<NodeId, Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Softplus,
    Exp,
    Log,
    Square,
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: NodeId,
        rhs: NodeId,
    },
    Unary {
        kind: UnaryKind,
        input: NodeId,
    },
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum {
        input: NodeId,
    },
    SumAxis {
        input: NodeId,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Narrow {
        input: NodeId,
        outer: usize,
        axis: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<(NodeId, usize)>,
        outer: usize,
        inner: usize,
    },
    Reshape {
        input: NodeId,
    },
    Gather {
        input: NodeId,
        rows: Vec<Option<usize>>,
        row_len: usize,
    },
    LogSoftmax {
        input: NodeId,
        cols: usize,
    },
    BandSolve {
        diag: NodeId,
        off: NodeId,
        rhs: NodeId,
        n: usize,
        t: usize,
        m: usize,
        transpose: bool,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
}

/// A computation graph. Cloning yields another handle to the same graph.
#[derive(Clone, Default)]
pub struct Graph(Rc<RefCell<Tape>>);

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: NodeId,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let mut tape = self.0.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// A leaf tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} holds {} values, got {}", numel(shape), values.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// A trainable leaf. Panics if `values` does not fill `shape`.
    pub fn param(&self, shape: &[usize], values: Vec<f64>) -> Tensor {
        self.leaf(shape, values, true).expect("parameter shape")
    }

    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], false, Op::Leaf)
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.0.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.0.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.0.borrow().nodes[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.0.borrow().nodes[self.id].value.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let tape = self.graph.0.borrow();
        let v = &tape.nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.0.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient; `None` until a backward pass reaches this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.0.borrow().nodes[self.id].grad.clone()
    }

    fn check_graph(&self, other: &Tensor) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::ForeignTensor)
        }
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let (shape, value, rg) = {
            let tape = self.graph.0.borrow();
            let node = &tape.nodes[self.id];
            let f: fn(f64, UnaryKind) -> f64 = |x, kind| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Scale(c) => c * x,
                UnaryKind::AddScalar(c) => x + c,
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Softplus => softplus(x),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Square => x * x,
                UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
            };
            let value = node.value.iter().map(|&x| f(x, kind)).collect();
            (node.shape.clone(), value, node.requires_grad)
        };
        self.graph
            .push(shape, value, rg, Op::Unary { kind, input: self.id })
    }

    fn binary(&self, rhs: &Tensor, kind: BinaryKind, op: &'static str) -> Result<Tensor> {
        self.check_graph(rhs)?;
        let (shape, value, rg) = {
            let tape = self.graph.0.borrow();
            let a = &tape.nodes[self.id];
            let b = &tape.nodes[rhs.id];
            let broadcastable = b.value.len() == 1 || a.shape.ends_with(&b.shape);
            if !broadcastable || b.value.is_empty() {
                return Err(Error::shape(
                    op,
                    format!("lhs {:?} cannot take rhs {:?}", a.shape, b.shape),
                ));
            }
            let bl = b.value.len();
            let value = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b.value[i % bl];
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    }
                })
                .collect();
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(
            shape,
            value,
            rg,
            Op::Binary {
                kind,
                lhs: self.id,
                rhs: rhs.id,
            },
        ))
    }

    /// Elementwise `self + rhs`. `rhs` may be a one-element tensor or have a
    /// shape equal to a trailing suffix of `self`'s shape; it is repeated.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinaryKind::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinaryKind::Div, "div")
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryKind::Tanh)
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&self) -> Tensor {
        self.unary(UnaryKind::Softplus)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(UnaryKind::Log)
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnaryKind::Square)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let (value, rg) = {
            let tape = self.graph.0.borrow();
            let node = &tape.nodes[self.id];
            (node.value.iter().sum::<f64>(), node.requires_grad)
        };
        self.graph
            .push(Vec::new(), vec![value], rg, Op::Sum { input: self.id })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let (value, rg) = {
            let tape = self.graph.0.borrow();
            let node = &tape.nodes[self.id];
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let src = &node.value[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
            }
            (out, node.requires_grad)
        };
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.graph.push(
            out_shape,
            value,
            rg,
            Op::SumAxis {
                input: self.id,
                outer,
                axis: len,
                inner,
            },
        ))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_graph(rhs)?;
        let (m, k, n, value, rg) = {
            let tape = self.graph.0.borrow();
            let a = &tape.nodes[self.id];
            let b = &tape.nodes[rhs.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape, b.shape),
                ));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(&a.value, &b.value, &mut out, m, k, n);
            (m, k, n, out, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(
            vec![m, n],
            value,
            rg,
            Op::MatMul {
                lhs: self.id,
                rhs: rhs.id,
                m,
                k,
                n,
            },
        ))
    }

    /// The sub-range `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let axis_len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let (value, rg) = {
            let tape = self.graph.0.borrow();
            let node = &tape.nodes[self.id];
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * axis_len + start) * inner;
                out.extend_from_slice(&node.value[base..base + len * inner]);
            }
            (out, node.requires_grad)
        };
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.graph.push(
            out_shape,
            value,
            rg,
            Op::Narrow {
                input: self.id,
                outer,
                axis: axis_len,
                inner,
                start,
                len,
            },
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let graph = first.graph.clone();
        let tape = graph.0.borrow();
        let base_shape = &tape.nodes[first.id].shape;
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base_shape:?}")));
        }
        let outer = numel(&base_shape[..axis]);
        let inner = numel(&base_shape[axis + 1..]);
        let mut inputs = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut rg = false;
        for p in parts {
            if !graph.same(&p.graph) {
                return Err(Error::ForeignTensor);
            }
            let node = &tape.nodes[p.id];
            let ok = node.shape.len() == base_shape.len()
                && node
                    .shape
                    .iter()
                    .zip(base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", node.shape, base_shape),
                ));
            }
            inputs.push((p.id, node.shape[axis]));
            total += node.shape[axis];
            rg |= node.requires_grad;
        }
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(id, len) in &inputs {
                let v = &tape.nodes[id].value;
                value.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape.clone();
        shape[axis] = total;
        drop(tape);
        Ok(graph.push(shape, value, rg, Op::Concat { inputs, outer, inner }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let (value, rg) = {
            let tape = self.graph.0.borrow();
            let node = &tape.nodes[self.id];
            if numel(shape) != node.value.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {shape:?}", node.shape),
                ));
            }
            (node.value.clone(), node.requires_grad)
        };
        Ok(self
            .graph
            .push(shape.to_vec(), value, rg, Op::Reshape { input: self.id }))
    }

    /// Builds a new tensor from rows (slices along axis 0) of `self`;
    /// `None` yields a row of zeros.
    pub fn gather_rows(&self, rows: &[Option<usize>]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let row_len = numel(&shape[1..]);
        let (value, rg) = {
            let tape = self.graph.0.borrow();
            let node = &tape.nodes[self.id];
            let mut out = Vec::with_capacity(rows.len() * row_len);
            for r in rows {
                match r {
                    Some(r) if *r < shape[0] => {
                        out.extend_from_slice(&node.value[r * row_len..(r + 1) * row_len])
                    }
                    Some(r) => {
                        return Err(Error::shape(
                            "gather_rows",
                            format!("row {r} out of {}", shape[0]),
                        ))
                    }
                    None => out.extend(std::iter::repeat_n(0.0, row_len)),
                }
            }
            (out, node.requires_grad)
        };
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.graph.push(
            out_shape,
            value,
            rg,
            Op::Gather {
                input: self.id,
                rows: rows.to_vec(),
                row_len,
            },
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        if cols == 0 {
            return Err(Error::shape("log_softmax", "empty last axis"));
        }
        let (value, rg) = {
            let tape = self.graph.0.borrow();
            let node = &tape.nodes[self.id];
            let mut out = node.value.clone();
            for row in out.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            (out, node.requires_grad)
        };
        Ok(self
            .graph
            .push(shape, value, rg, Op::LogSoftmax { input: self.id, cols }))
    }

    /// Solves `B x = rhs` row by row, where each `B` is upper bi-diagonal with
    /// main diagonal `diag[i]` (shape `[n, t]`) and superdiagonal `off[i]`
    /// (shape `[n, t-1]`). With `transpose`, solves `Bᵀ x = rhs` instead.
    /// `rhs` has shape `[n, t]` or `[n, t, m]`. Cost is `O(n·t·m)`.
    pub fn band_solve(diag: &Tensor, off: &Tensor, rhs: &Tensor, transpose: bool) -> Result<Tensor> {
        diag.check_graph(off)?;
        diag.check_graph(rhs)?;
        let graph = diag.graph.clone();
        let (n, t, m, value, rg, rshape) = {
            let tape = graph.0.borrow();
            let d = &tape.nodes[diag.id];
            let o = &tape.nodes[off.id];
            let r = &tape.nodes[rhs.id];
            if d.shape.len() != 2 {
                return Err(Error::shape("band_solve", format!("diag {:?}", d.shape)));
            }
            let (n, t) = (d.shape[0], d.shape[1]);
            let m = match r.shape.as_slice() {
                [a, b] if *a == n && *b == t => 1,
                [a, b, c] if *a == n && *b == t => *c,
                _ => {
                    return Err(Error::shape(
                        "band_solve",
                        format!("rhs {:?} for diag {:?}", r.shape, d.shape),
                    ))
                }
            };
            if o.shape != [n, t.saturating_sub(1)] {
                return Err(Error::shape(
                    "band_solve",
                    format!("off {:?} for diag {:?}", o.shape, d.shape),
                ));
            }
            if let Some(i) = d.value.iter().position(|&x| x == 0.0) {
                return Err(Error::Singular { index: i % t.max(1) });
            }
            let mut x = r.value.clone();
            for row in 0..n {
                bidiag_solve(
                    &d.value[row * t..(row + 1) * t],
                    &o.value[row * t.saturating_sub(1)..(row + 1) * t.saturating_sub(1)],
                    &mut x[row * t * m..(row + 1) * t * m],
                    m,
                    transpose,
                );
            }
            (
                n,
                t,
                m,
                x,
                d.requires_grad || o.requires_grad || r.requires_grad,
                r.shape.clone(),
            )
        };
        Ok(graph.push(
            rshape,
            value,
            rg,
            Op::BandSolve {
                diag: diag.id,
                off: off.id,
                rhs: rhs.id,
                n,
                t,
                m,
                transpose,
            },
        ))
    }

    /// Back-propagates from this scalar into every `requires_grad` leaf,
    /// adding to any gradient already accumulated there. Returns the
    /// accumulated gradients of all leaves the pass reached.
    pub fn backward(&self) -> Result<GradMap> {
        let leaf_grads = {
            let tape = self.graph.0.borrow();
            let out = &tape.nodes[self.id];
            if out.value.len() != 1 {
                return Err(Error::NotScalar(out.shape.clone()));
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
            grads[self.id] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=self.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &tape.nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                } else {
                    propagate(&tape.nodes, node, &g, &mut grads);
                }
            }
            leaf_grads
        };
        let mut tape = self.graph.0.borrow_mut();
        for (id, g) in leaf_grads {
            let slot = &mut tape.nodes[id].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(tape
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.grad.clone().map(|g| (i, g)))
            .collect())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

/// In-place bi-diagonal solve on a `[t, m]` block.
fn bidiag_solve(diag: &[f64], off: &[f64], x: &mut [f64], m: usize, transpose: bool) {
    let t = diag.len();
    if t == 0 {
        return;
    }
    if transpose {
        // Bᵀ is lower bi-diagonal: forward substitution.
        for c in 0..m {
            x[c] /= diag[0];
        }
        for s in 1..t {
            for c in 0..m {
                x[s * m + c] = (x[s * m + c] - off[s - 1] * x[(s - 1) * m + c]) / diag[s];
            }
        }
    } else {
        for c in 0..m {
            x[(t - 1) * m + c] /= diag[t - 1];
        }
        for s in (0..t - 1).rev() {
            for c in 0..m {
                x[s * m + c] = (x[s * m + c] - off[s] * x[(s + 1) * m + c]) / diag[s];
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(g);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, lhs, rhs } => {
            let a = &nodes[*lhs].value;
            let b = &nodes[*rhs].value;
            let bl = b.len();
            accumulate(grads, nodes, *lhs, |ga| {
                for (i, ga) in ga.iter_mut().enumerate() {
                    *ga += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[i],
                        BinaryKind::Mul => g[i] * b[i % bl],
                        BinaryKind::Div => g[i] / b[i % bl],
                    };
                }
            });
            accumulate(grads, nodes, *rhs, |gb| {
                for (i, &gi) in g.iter().enumerate() {
                    let j = i % bl;
                    gb[j] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * a[i],
                        BinaryKind::Div => -gi * a[i] / (b[j] * b[j]),
                    };
                }
            });
        }
        Op::Unary { kind, input } => {
            let x = &nodes[*input].value;
            let y = &node.value;
            accumulate(grads, nodes, *input, |gx| {
                for i in 0..gx.len() {
                    let d = match *kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Scale(c) => c,
                        UnaryKind::AddScalar(_) => 1.0,
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Softplus => sigmoid(x[i]),
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => 1.0 / x[i],
                        UnaryKind::Square => 2.0 * x[i],
                        UnaryKind::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[i] += g[i] * d;
                }
            });
        }
        Op::MatMul { lhs, rhs, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let a = &nodes[*lhs].value;
            let b = &nodes[*rhs].value;
            // dA = G Bᵀ
            accumulate(grads, nodes, *lhs, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            // dB = Aᵀ G
            accumulate(grads, nodes, *rhs, |gb| {
                for i in 0..m {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += aip * gv;
                        }
                    }
                }
            });
        }
        Op::Sum { input } => {
            accumulate(grads, nodes, *input, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
        }
        Op::SumAxis {
            input,
            outer,
            axis,
            inner,
        } => {
            accumulate(grads, nodes, *input, |gx| {
                for o in 0..*outer {
                    for a in 0..*axis {
                        for i in 0..*inner {
                            gx[(o * axis + a) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Narrow {
            input,
            outer,
            axis,
            inner,
            start,
            len,
        } => {
            accumulate(grads, nodes, *input, |gx| {
                for o in 0..*outer {
                    let dst = (o * axis + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Concat {
            inputs,
            outer,
            inner,
        } => {
            let total: usize = inputs.iter().map(|(_, l)| l).sum();
            let mut offset = 0;
            for &(id, len) in inputs {
                accumulate(grads, nodes, id, |gx| {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        for i in 0..len * inner {
                            gx[o * len * inner + i] += g[src + i];
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Reshape { input } => {
            accumulate(grads, nodes, *input, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            });
        }
        Op::Gather {
            input,
            rows,
            row_len,
        } => {
            accumulate(grads, nodes, *input, |gx| {
                for (out_row, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        for i in 0..*row_len {
                            gx[r * row_len + i] += g[out_row * row_len + i];
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { input, cols } => {
            let y = &node.value;
            accumulate(grads, nodes, *input, |gx| {
                for ((gx, gr), yr) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let total: f64 = gr.iter().sum();
                    for c in 0..*cols {
                        gx[c] += gr[c] - yr[c].exp() * total;
                    }
                }
            });
        }
        Op::BandSolve {
            diag,
            off,
            rhs,
            n,
            t,
            m,
            transpose,
        } => {
            let (n, t, m) = (*n, *t, *m);
            let tm1 = t.saturating_sub(1);
            let d = &nodes[*diag].value;
            let o = &nodes[*off].value;
            let x = &node.value;
            // x = A⁻¹ r  ⇒  ḡ_r = A⁻ᵀ ḡ,  ḡ_A = −ḡ_r xᵀ restricted to the band.
            let mut gr = g.to_vec();
            for row in 0..n {
                bidiag_solve(
                    &d[row * t..(row + 1) * t],
                    &o[row * tm1..(row + 1) * tm1],
                    &mut gr[row * t * m..(row + 1) * t * m],
                    m,
                    !transpose,
                );
            }
            accumulate(grads, nodes, *diag, |gd| {
                for row in 0..n {
                    for s in 0..t {
                        let base = (row * t + s) * m;
                        let dot: f64 = (0..m).map(|c| gr[base + c] * x[base + c]).sum();
                        gd[row * t + s] -= dot;
                    }
                }
            });
            accumulate(grads, nodes, *off, |go| {
                for row in 0..n {
                    for s in 0..tm1 {
                        let (gi, xi) = if *transpose { (s + 1, s) } else { (s, s + 1) };
                        let gb = (row * t + gi) * m;
                        let xb = (row * t + xi) * m;
                        let dot: f64 = (0..m).map(|c| gr[gb + c] * x[xb + c]).sum();
                        go[row * tm1 + s] -= dot;
                    }
                }
            });
            accumulate(grads, nodes, *rhs, |grhs| {
                grhs.iter_mut().zip(&gr).for_each(|(a, b)| *a += b)
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&Graph, &Tensor) -> Tensor, x0: Vec<f64>, shape: &[usize]) {
        let g = Graph::new();
        let x = g.param(shape, x0.clone());
        build(&g, &x).backward().unwrap();
        let analytic = x.grad().unwrap();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xv = x0.clone();
                xv[i] += delta;
                let g = Graph::new();
                let x = g.param(shape, xv);
                build(&g, &x).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            assert!(err < 1e-6, "entry {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(&[], vec![3.0]);
        let y = x.square();
        let grads = y.backward().unwrap();
        assert_eq!(grads[&x.id()], vec![6.0]);
    }

    #[test]
    fn constant_leaf_gets_no_gradient() {
        let g = Graph::new();
        let x = g.param(&[2], vec![1.0, 2.0]);
        let c = g.constant(&[2], vec![3.0, 4.0]).unwrap();
        let grads = x.mul(&c).unwrap().sum().backward().unwrap();
        assert!(c.grad().is_none());
        assert!(!grads.contains_key(&c.id()));
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let g = Graph::new();
        let x = g.param(&[], vec![2.0]);
        let y = x.square();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        g.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let g = Graph::new();
        let x = g.param(&[2], vec![1.0, 2.0]);
        assert!(matches!(x.tanh().backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn forward_values() {
        let g = Graph::new();
        let z = g.constant(&[3], vec![0.0; 3]).unwrap();
        assert_eq!(z.tanh().value(), vec![0.0; 3]);
        let sp = g.scalar(0.0).softplus().item();
        assert!((sp - 2f64.ln()).abs() < 1e-15);

        let eye = g
            .constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap();
        let a_vals: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let a = g.constant(&[3, 2], a_vals.clone()).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().value(), a_vals);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("[2, 3] x [2, 2]"), "{err}");
        assert!(a.add(&b).is_err());
        assert!(a.reshape(&[4]).is_err());
    }

    #[test]
    fn foreign_tensors_are_rejected() {
        let a = Graph::new().scalar(1.0);
        let b = Graph::new().scalar(1.0);
        assert!(matches!(a.add(&b), Err(Error::ForeignTensor)));
    }

    #[test]
    fn sum_of_tanh_of_linear_map_matches_finite_differences() {
        let w = vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9];
        let xv = vec![0.5, -1.2];
        fd_check(
            |g, wt| {
                let x = g.constant(&[2, 1], xv.clone()).unwrap();
                wt.matmul(&x).unwrap().tanh().sum()
            },
            w,
            &[3, 2],
        );
    }

    #[test]
    fn gather_concat_narrow_gradients() {
        fd_check(
            |_, x| {
                let shifted = x.gather_rows(&[None, Some(0), Some(1), Some(1)]).unwrap();
                let x4 = Tensor::concat(&[x, x], 0).unwrap();
                let both = Tensor::concat(&[&x4, &shifted], 1).unwrap();
                let part = both.narrow(1, 1, 3).unwrap();
                part.square().sum_axis(0).unwrap().exp().sum()
            },
            vec![0.1, -0.3, 0.2, 0.05, 0.4, -0.2],
            &[2, 3],
        );
    }

    #[test]
    fn log_softmax_gradient() {
        fd_check(
            |g, x| {
                let w = g.constant(&[2, 3], vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0]).unwrap();
                x.log_softmax().unwrap().mul(&w).unwrap().sum()
            },
            vec![0.3, -1.0, 2.0, 0.0, 0.1, -0.4],
            &[2, 3],
        );
    }

    #[test]
    fn band_solve_forward_matches_dense() {
        let g = Graph::new();
        let d = g.constant(&[1, 3], vec![2.0, 1.5, 0.5]).unwrap();
        let o = g.constant(&[1, 2], vec![0.3, -1.0]).unwrap();
        let r = g.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = Tensor::band_solve(&d, &o, &r, false).unwrap().value();
        // B x = r with B = [[2, .3, 0], [0, 1.5, -1], [0, 0, .5]]
        let bx = [
            2.0 * x[0] + 0.3 * x[1],
            1.5 * x[1] - 1.0 * x[2],
            0.5 * x[2],
        ];
        for (a, b) in bx.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let xt = Tensor::band_solve(&d, &o, &r, true).unwrap().value();
        let btx = [
            2.0 * xt[0],
            0.3 * xt[0] + 1.5 * xt[1],
            -xt[1] + 0.5 * xt[2],
        ];
        for (a, b) in btx.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn band_solve_gradients() {
        for transpose in [false, true] {
            // params packed as [diag(2x3) | off(2x2) | rhs(2x3x2)]
            let p: Vec<f64> = (0..22).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.13).collect();
            let mut p = p;
            for v in p.iter_mut().take(6) {
                *v = 1.0 + v.abs();
            }
            fd_check(
                |_, x| {
                    let d = x.narrow(0, 0, 6).unwrap().reshape(&[2, 3]).unwrap();
                    let o = x.narrow(0, 6, 4).unwrap().reshape(&[2, 2]).unwrap();
                    let r = x.narrow(0, 10, 12).unwrap().reshape(&[2, 3, 2]).unwrap();
                    let s = Tensor::band_solve(&d, &o, &r, transpose).unwrap();
                    s.square().sum().add_scalar(0.0).mul(&s.sum()).unwrap()
                },
                p,
                &[22],
            );
        }
    }

    #[test]
    fn band_solve_zero_pivot() {
        let g = Graph::new();
        let d = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let o = g.constant(&[1, 1], vec![1.0]).unwrap();
        let r = g.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            Tensor::band_solve(&d, &o, &r, false),
            Err(Error::Singular { index: 1 })
        ));
    }

    #[test]
    fn elementwise_ops_gradients() {
        fd_check(
            |g, x| {
                let c = g.constant(&[3], vec![0.5, -1.5, 2.0]).unwrap();
                let s = g.scalar(1.7);
                let a = x.add(&c).unwrap().mul(&x.tanh()).unwrap();
                let b = x.softplus().sub(&x.exp().scale(0.1)).unwrap();
                let q = x.square().add_scalar(1.0).log().div(&s).unwrap();
                let k = x.scale(3.0).clamp(-10.0, 10.0).neg();
                a.add(&b).unwrap().add(&q).unwrap().add(&k).unwrap().mean()
            },
            vec![0.2, 0.7, 1.3, -0.4, -2.0, 0.9],
            &[2, 3],
        );
    }
}
