//! Record-then-backward differentiation tape.
//!
//! Every operation appends a node holding its output value and the inputs
//! needed by its backward rule. Nodes are only ever appended, so the node list
//! is already a topological order and `backward` walks it in reverse.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the log in
/// [`Tape::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    MulRow { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { t: usize, s: usize },
    MulConst { a: usize, c: f64 },
    ScaleRows { a: usize, weights: Vec<f64> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Softmax { a: usize },
    CrossEntropy { probs: usize, gold: usize },
    Gelu { a: usize },
    LayerNorm { a: usize, rstd: Vec<f64> },
    Gather { table: usize, ids: Vec<usize> },
    Sum { a: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A single forward/backward recording. Use one tape per training step.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * K * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node(v).grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    fn node(&self, v: Var) -> &Node {
        assert!(self.owns(v), "variable does not belong to this tape");
        &self.nodes[v.index]
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::StaleTape);
        }
        if vars.iter().any(|v| !self.owns(*v)) {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(())
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.index].value.is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "non-finite output from {op:?} on finite inputs"
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.push_unchecked(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref other => Err(AutodiffError::InvalidShape {
                op,
                shape: other.to_vec(),
                reason: "expected a rank-2 tensor".into(),
            }),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.index, b: b.index }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let (r, c) = self.matrix_dims("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose { a: a.index }, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a: a.index, b: b.index }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Sub { a: a.index, b: b.index }, &[a, b]))
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let cols = *self.shape(a).last().unwrap();
        if self.shape(b) != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(cols)
    }

    /// Adds the vector `b` to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let cols = self.row_broadcast_check("add_row", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(cols.max(1)) {
            for (o, y) in row.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::AddRow { a: a.index, b: b.index }, &[a, b]))
    }

    /// Multiplies every row of `a` elementwise by the vector `b` (gain broadcast).
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let cols = self.row_broadcast_check("mul_row", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(cols.max(1)) {
            for (o, y) in row.iter_mut().zip(bv) {
                *o *= y;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::MulRow { a: a.index, b: b.index }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a: a.index, b: b.index }, &[a, b]))
    }

    /// Multiplies `t` by the single-element tensor `s`.
    pub fn scale(&mut self, t: Var, s: Var) -> Result<Var> {
        self.check(&[t, s])?;
        if self.shape(s) != [1] {
            return Err(AutodiffError::NotScalar {
                op: "scale",
                shape: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let out = self.value(t).data().iter().map(|x| sv * x).collect();
        let value = Tensor::new(self.shape(t).to_vec(), out)?;
        Ok(self.push(value, Op::Scale { t: t.index, s: s.index }, &[t, s]))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).data().iter().map(|x| c * x).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::MulConst { a: a.index, c }, &[a]))
    }

    /// Multiplies row `i` of `a` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        self.check(&[a])?;
        let (rows, cols) = self.matrix_dims("scale_rows", a)?;
        if weights.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                left: vec![rows, cols],
                right: vec![weights.len()],
            });
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| weights[i / cols] * x)
            .collect();
        let value = Tensor::new(vec![rows, cols], out)?;
        let op = Op::ScaleRows {
            a: a.index,
            weights: weights.to_vec(),
        };
        Ok(self.push(value, op, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        self.check(parts)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "concat",
                index: axis,
                len: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.index).collect(),
            axis,
        };
        Ok(self.push(value, op, parts))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: axis,
                len: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let op = Op::Slice {
            a: a.index,
            axis,
            start,
        };
        Ok(self.push(value, op, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a: a.index }, &[a]))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Softmax over the last axis where positions with `keep[j] == false`
    /// receive exactly zero probability. A row with every position masked
    /// is all zeros.
    pub fn softmax_masked(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        self.check(&[a])?;
        let (rows, cols) = self.value(a).as_matrix_dims();
        if let Some(mask) = keep {
            if mask.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "softmax",
                    left: self.shape(a).to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let kept = |j: usize| keep.is_none_or(|m| m[j]);
        let av = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let y = &mut out[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&j| kept(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..cols {
                if kept(j) {
                    y[j] = (x[j] - max).exp();
                    total += y[j];
                }
            }
            for v in y.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a: a.index }, &[a]))
    }

    /// `-ln(max(probs[gold], 1e-12))` for a probability vector.
    pub fn cross_entropy(&mut self, probs: Var, gold: usize) -> Result<Var> {
        self.check(&[probs])?;
        let (rows, cols) = self.value(probs).as_matrix_dims();
        if rows != 1 {
            return Err(AutodiffError::InvalidShape {
                op: "cross_entropy",
                shape: self.shape(probs).to_vec(),
                reason: "expected a single probability vector".into(),
            });
        }
        if gold >= cols {
            return Err(AutodiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: gold,
                len: cols,
            });
        }
        let p = self.value(probs).data()[gold];
        let value = Tensor::scalar(-p.max(LOG_CLAMP).ln());
        let op = Op::CrossEntropy {
            probs: probs.index,
            gold,
        };
        Ok(self.push(value, op, &[probs]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).data().iter().map(|&x| gelu_parts(x).0).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Gelu { a: a.index }, &[a]))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    /// Gain and bias are applied separately with [`Tape::mul_row`] and
    /// [`Tape::add_row`].
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check(&[a])?;
        let (rows, cols) = self.value(a).as_matrix_dims();
        let av = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
            rstd.push(inv);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { a: a.index, rstd }, &[a]))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let (rows, cols) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(AutodiffError::InvalidShape {
                op: "gather_rows",
                shape: vec![0, cols],
                reason: "no ids".into(),
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        let op = Op::Gather {
            table: table.index,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Sum of all entries, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        Ok(self.push(value, Op::Sum { a: a.index }, &[a]))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of every differentiable node reachable from `root`.
    /// The tape is spent afterwards: recording or calling backward again fails
    /// with [`AutodiffError::StaleTape`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(&[root])?;
        if self.value(root).numel() != 1 {
            return Err(AutodiffError::NotScalar {
                op: "backward",
                shape: self.shape(root).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        grads[root.index] = Some(vec![1.0]);

        for i in (0..=root.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                if let Some(g) = g {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| nodes[j].value.data();
        let out = nodes[i].value.data();

        fn acc(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; len])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = nodes[*a].value.as_matrix_dims();
                let n = nodes[*b].value.as_matrix_dims().1;
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = acc(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let (r, c) = nodes[*a].value.as_matrix_dims();
                let ga = acc(grads, *a, r * c);
                for x in 0..r {
                    for y in 0..c {
                        ga[x * c + y] += g[y * r + x];
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(*a) {
                    for (o, x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if wants(*b) {
                    for (o, x) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *o += sign * x;
                    }
                }
            }
            Op::AddRow { a, b } => {
                let cols = nodes[*b].value.numel();
                if wants(*a) {
                    for (o, x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, cols);
                    for grow in g.chunks_exact(cols.max(1)) {
                        for (o, x) in gb.iter_mut().zip(grow) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulRow { a, b } => {
                let cols = nodes[*b].value.numel();
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (orow, grow) in ga.chunks_exact_mut(cols.max(1)).zip(g.chunks_exact(cols.max(1))) {
                        for ((o, x), y) in orow.iter_mut().zip(grow).zip(bv) {
                            *o += x * y;
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, cols);
                    for (grow, arow) in g.chunks_exact(cols.max(1)).zip(av.chunks_exact(cols.max(1))) {
                        for ((o, x), y) in gb.iter_mut().zip(grow).zip(arow) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    for ((o, x), y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    for ((o, x), y) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale { t, s } => {
                let sv = val(*s)[0];
                if wants(*t) {
                    for (o, x) in acc(grads, *t, g.len()).iter_mut().zip(g) {
                        *o += sv * x;
                    }
                }
                if wants(*s) {
                    let dot: f64 = g.iter().zip(val(*t)).map(|(x, y)| x * y).sum();
                    acc(grads, *s, 1)[0] += dot;
                }
            }
            Op::MulConst { a, c } => {
                for (o, x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *o += c * x;
                }
            }
            Op::ScaleRows { a, weights } => {
                let cols = g.len() / weights.len();
                let ga = acc(grads, *a, g.len());
                for ((orow, grow), w) in ga.chunks_exact_mut(cols.max(1)).zip(g.chunks_exact(cols.max(1))).zip(weights) {
                    for (o, x) in orow.iter_mut().zip(grow) {
                        *o += w * x;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(nodes[i].value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let gp = acc(grads, p, outer * plen * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * plen * inner;
                            for (d, s) in gp[dst..dst + plen * inner]
                                .iter_mut()
                                .zip(&g[src..src + plen * inner])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, alen, inner) = axis_split(nodes[*a].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                let ga = acc(grads, *a, outer * alen * inner);
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    for (d, s) in ga[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                        *d += s;
                    }
                }
            }
            Op::Reshape { a } => {
                for (o, x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *o += x;
                }
            }
            Op::Softmax { a } => {
                let (rows, cols) = nodes[i].value.as_matrix_dims();
                let ga = acc(grads, *a, rows * cols);
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::CrossEntropy { probs, gold } => {
                let n = nodes[*probs].value.numel();
                let p = val(*probs)[*gold];
                let gp = acc(grads, *probs, n);
                if p >= LOG_CLAMP {
                    gp[*gold] += -g[0] / p;
                }
            }
            Op::Gelu { a } => {
                let av = val(*a);
                for ((o, x), v) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(av) {
                    *o += x * gelu_parts(*v).1;
                }
            }
            Op::LayerNorm { a, rstd } => {
                let (rows, cols) = nodes[i].value.as_matrix_dims();
                let ga = acc(grads, *a, rows * cols);
                let nf = cols as f64;
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let mean_g = gy.iter().sum::<f64>() / nf;
                    let mean_gy = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / nf;
                    for j in 0..cols {
                        ga[r * cols + j] += rstd[r] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = nodes[*table].value.as_matrix_dims();
                let gt = acc(grads, *table, rows * cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (d, s) in gt[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                    {
                        *d += s;
                    }
                }
            }
            Op::Sum { a } => {
                let n = nodes[*a].value.numel();
                for o in acc(grads, *a, n).iter_mut() {
                    *o += g[0];
                }
            }
        }
    }
}
