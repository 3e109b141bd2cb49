use crate::error::TensorError;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Vector over the trailing axis.
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose(Var),
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    L2Normalize { a: Var, axis: usize, eps: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    SumAll(Var),
    SumAxis { a: Var, axis: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, rows: Vec<usize> },
    ScatterRows { a: Var, rows: Vec<usize> },
    ShiftRows { a: Var, offset: isize },
    RowScale { a: Var, s: Var },
    PickPerRow { a: Var, cols: Vec<usize> },
    /// Scalar output whose gradient with respect to `a` was computed during
    /// the forward pass.
    ScalarWithGrad { a: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode differentiation tape.
///
/// Nodes are appended in construction order, so every op's inputs precede it
/// and a reverse sweep is a valid topological traversal. A graph is confined
/// to one thread; build a fresh graph for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?.to_vec();
        Some(Tensor::new(self.shape(v).to_vec(), g).expect("gradient shape matches value"))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(id)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Broadcast::Row)
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Orders operands so the broadcast operand is on the right.
    fn commutative_operands(&self, a: Var, b: Var) -> (Var, Var) {
        if self.value(a).len() < self.value(b).len() {
            (b, a)
        } else {
            (a, b)
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var, TensorError> {
        let bc = self.broadcast_kind(name, a, b)?;
        let (xa, xb) = (self.data(a), self.data(b));
        let out: Vec<f64> = match bc {
            Broadcast::Same => xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect(),
            Broadcast::Scalar => xa.iter().map(|&p| f(p, xb[0])).collect(),
            Broadcast::Row => {
                let n = xb.len();
                xa.iter().enumerate().map(|(i, &p)| f(p, xb[i % n])).collect()
            }
        };
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, op(a, b, bc), &[a, b]))
    }

    /// Elementwise sum; either operand may broadcast as a scalar or a
    /// trailing-axis vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = self.commutative_operands(a, b);
        self.binary("add", a, b, |p, q| p + q, Op::Add)
    }

    /// `a - b`; only `b` may broadcast.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = self.commutative_operands(a, b);
        self.binary("mul", a, b, |p, q| p * q, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| c * x);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::ln);
        self.push(value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let ([m, k], [k2, n]) = (sa, sb) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let (m, k, n) = (*m, *k, *n);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn check_finite(&self, a: Var, op: &'static str) -> Result<(), TensorError> {
        if self.value(a).all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_finite(a, "softmax")?;
        let (outer, n, inner) = split_axis(self.shape(a), axis)?;
        let mut out = self.data(a).to_vec();
        for_each_lane(outer, n, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - max).exp();
                sum += out[i];
            }
            for i in idx {
                out[i] /= sum;
            }
        });
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a, axis }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_finite(a, "log_softmax")?;
        let (outer, n, inner) = split_axis(self.shape(a), axis)?;
        let mut out = self.data(a).to_vec();
        for_each_lane(outer, n, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.clone().map(|i| (out[i] - max).exp()).sum::<f64>().ln();
            for i in idx {
                out[i] -= lse;
            }
        });
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { a, axis }, &[a]))
    }

    /// Divides every lane along `axis` by `max(‖lane‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        let (outer, n, inner) = split_axis(self.shape(a), axis)?;
        let mut out = self.data(a).to_vec();
        for_each_lane(outer, n, inner, |idx| {
            let norm = idx.clone().map(|i| out[i] * out[i]).sum::<f64>().sqrt().max(eps);
            for i in idx {
                out[i] /= norm;
            }
        });
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { a, axis, eps }, &[a]))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        split_axis(&base, axis)?;
        let mut shape = base.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.data(a).iter().sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * n + j) * inner + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::SumAxis { a, axis }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let n = split_axis(self.shape(a), axis)?.1 as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        if start >= end || end > c {
            return Err(TensorError::Contract(format!(
                "column slice {start}..{end} out of range for {c} columns"
            )));
        }
        let w = end - start;
        let x = self.data(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![r, w], out)?;
        Ok(self.push(value, Op::SliceCols { a, start }, &[a]))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(TensorError::Contract(format!(
                "row gather {rows:?} invalid for {r} rows"
            )));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    /// Places row `i` of `a` at output row `rows[i]` of a zero `[total×c]` matrix.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], total: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        if rows.len() != r || rows.iter().any(|&i| i >= total) {
            return Err(TensorError::Contract(format!(
                "row scatter of {r} rows into {total} with indices {rows:?}"
            )));
        }
        let x = self.data(a);
        let mut out = vec![0.0; total * c];
        for (src, &dst) in rows.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] += x[src * c + j];
            }
        }
        let value = Tensor::new(vec![total, c], out)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    /// `out[t] = a[t + offset]`, zero where `t + offset` falls outside the matrix.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        for t in 0..r {
            let src = t as isize + offset;
            if (0..r as isize).contains(&src) {
                let src = src as usize;
                out[t * c..(t + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::ShiftRows { a, offset }, &[a]))
    }

    /// Multiplies row `t` of matrix `a` by `s[t]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(s).len() != r {
            return Err(TensorError::Shape {
                op: "row_scale",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let (x, w) = (self.data(a), self.data(s));
        let out = x.iter().enumerate().map(|(i, &v)| v * w[i / c]).collect();
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::RowScale { a, s }, &[a, s]))
    }

    /// `out[t] = a[t, cols[t]]`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(TensorError::Contract(format!(
                "per-row pick {cols:?} invalid for shape [{r}, {c}]"
            )));
        }
        let x = self.data(a);
        let out = cols.iter().enumerate().map(|(t, &j)| x[t * c + j]).collect();
        let value = Tensor::new(vec![r], out)?;
        Ok(self.push(
            value,
            Op::PickPerRow {
                a,
                cols: cols.to_vec(),
            },
            &[a],
        ))
    }

    /// Records a scalar whose gradient with respect to `a` is already known.
    pub(crate) fn scalar_with_grad(&mut self, a: Var, value: f64, grad: Vec<f64>) -> Var {
        debug_assert_eq!(grad.len(), self.value(a).len());
        self.push(Tensor::scalar(value), Op::ScalarWithGrad { a, grad }, &[a])
    }

    /// Populates gradients of the scalar `loss` for every reachable node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Calls `f` with the flat index range of every lane along the split axis.
fn for_each_lane(
    outer: usize,
    n: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                reduce_broadcast(gb, g, *bc, |_, y| sign * y);
            }
        }
        Op::Mul(a, b, bc) => {
            let (xa, xb) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                let n = xb.len();
                for (k, x) in ga.iter_mut().enumerate() {
                    let q = match bc {
                        Broadcast::Same => xb[k],
                        Broadcast::Scalar => xb[0],
                        Broadcast::Row => xb[k % n],
                    };
                    *x += g[k] * q;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                reduce_broadcast(gb, g, *bc, |k, y| y * xa[k]);
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::Relu(a) => {
            let xa = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    if xa[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            }
        }
        Op::Log(a) => {
            let xa = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] / xa[k];
                }
            }
        }
        Op::Exp(a) => {
            let y = node.value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k];
                }
            }
        }
        Op::Square(a) => {
            let xa = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += 2.0 * xa[k] * g[k];
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (xa, xb) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::matmul_bt_acc(g, xb, ga, *m, *n, *k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::matmul_at_acc(xa, g, gb, *m, *k, *n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for p in 0..r {
                    for q in 0..c {
                        ga[p * c + q] += g[q * r + p];
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("validated");
            if let Some(ga) = slot(nodes, grads, *a) {
                for_each_lane(outer, n, inner, |idx| {
                    let dot: f64 = idx.clone().map(|k| g[k] * y[k]).sum();
                    for k in idx {
                        ga[k] += y[k] * (g[k] - dot);
                    }
                });
            }
        }
        Op::LogSoftmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("validated");
            if let Some(ga) = slot(nodes, grads, *a) {
                for_each_lane(outer, n, inner, |idx| {
                    let total: f64 = idx.clone().map(|k| g[k]).sum();
                    for k in idx {
                        ga[k] += g[k] - y[k].exp() * total;
                    }
                });
            }
        }
        Op::L2Normalize { a, axis, eps } => {
            let (xa, y) = (val(*a), node.value.data());
            let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("validated");
            if let Some(ga) = slot(nodes, grads, *a) {
                for_each_lane(outer, n, inner, |idx| {
                    let norm = idx.clone().map(|k| xa[k] * xa[k]).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dot: f64 = idx.clone().map(|k| g[k] * y[k]).sum();
                        for k in idx {
                            ga[k] += (g[k] - y[k] * dot) / norm;
                        }
                    } else {
                        for k in idx {
                            ga[k] += g[k] / eps;
                        }
                    }
                });
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let block = nodes[p.0].value.shape()[*axis] * inner;
                if let Some(gp) = slot(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + block];
                        gp[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += block;
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::SumAxis { a, axis } => {
            let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), *axis).expect("validated");
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..n {
                        for q in 0..inner {
                            ga[(o * n + j) * inner + q] += g[o * inner + q];
                        }
                    }
                }
            }
        }
        Op::SliceCols { a, start } => {
            let (r, w) = (node.value.shape()[0], node.value.shape()[1]);
            let c = nodes[a.0].value.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                for p in 0..r {
                    for q in 0..w {
                        ga[p * c + start + q] += g[p * w + q];
                    }
                }
            }
        }
        Op::GatherRows { a, rows } => {
            let c = node.value.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                for (dst, &src) in rows.iter().enumerate() {
                    for q in 0..c {
                        ga[src * c + q] += g[dst * c + q];
                    }
                }
            }
        }
        Op::ScatterRows { a, rows } => {
            let c = node.value.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                for (src, &dst) in rows.iter().enumerate() {
                    for q in 0..c {
                        ga[src * c + q] += g[dst * c + q];
                    }
                }
            }
        }
        Op::ShiftRows { a, offset } => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for t in 0..r {
                    let src = t as isize + offset;
                    if (0..r as isize).contains(&src) {
                        let src = src as usize;
                        for q in 0..c {
                            ga[src * c + q] += g[t * c + q];
                        }
                    }
                }
            }
        }
        Op::RowScale { a, s } => {
            let c = node.value.shape()[1];
            let (xa, xs) = (val(*a), val(*s));
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * xs[k / c];
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for k in 0..g.len() {
                    gs[k / c] += g[k] * xa[k];
                }
            }
        }
        Op::PickPerRow { a, cols } => {
            let c = nodes[a.0].value.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                for (t, &j) in cols.iter().enumerate() {
                    ga[t * c + j] += g[t];
                }
            }
        }
        Op::ScalarWithGrad { a, grad } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(grad).for_each(|(x, y)| *x += g[0] * y);
            }
        }
    }
}

/// Accumulates `f(k, g[k])` into the (possibly broadcast) right operand.
fn reduce_broadcast(gb: &mut [f64], g: &[f64], bc: Broadcast, f: impl Fn(usize, f64) -> f64) {
    match bc {
        Broadcast::Same => {
            for k in 0..g.len() {
                gb[k] += f(k, g[k]);
            }
        }
        Broadcast::Scalar => gb[0] += (0..g.len()).map(|k| f(k, g[k])).sum::<f64>(),
        Broadcast::Row => {
            let n = gb.len();
            for k in 0..g.len() {
                gb[k % n] += f(k, g[k]);
            }
        }
    }
}

mod kernels {
    /// `out[m×n] = a[m×k] · b[k×n]`.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
    }

    /// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
    pub fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    /// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
    pub fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                orow.iter_mut().zip(grow).for_each(|(o, y)| *o += x * y);
            }
        }
    }
}
