use std::fmt;

use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Real, Result, Tensor, TensorError, MASK_SENTINEL, MASK_THRESHOLD};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable op the tape can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Scale,
    Softmax,
    CausalMask,
    ConcatCols,
    ConcatRows,
    SliceRows,
    SliceCols,
    Gather,
    Reshape,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::CausalMask,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::CausalMask => "causal_mask",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    Softmax(Var),
    CausalMask(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    Gather { table: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(_) => OpKind::Softmax,
            Op::CausalMask(_) => OpKind::CausalMask,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
    param: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// a single reverse sweep is a valid topological traversal.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    work: u64,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    let blen: usize = b.iter().product();
    let alen: usize = a.iter().product();
    let last = a.last().copied().unwrap_or(1);
    blen == last && blen > 0 && alen.is_multiple_of(blen) && b.last().copied().unwrap_or(1) == last
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            work: 0,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Rough count of scalar multiply-adds performed by the recorded forward ops.
    pub fn work(&self) -> u64 {
        self.work
    }

    /// Deliberately breaks the backward rule of one op kind (its upstream
    /// gradient is halved). Exists so the gradient checker can be shown to
    /// catch a wrong rule.
    pub fn set_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf; `backward` always returns a gradient for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
            param: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> Result<Var> {
        if !value.is_all_finite() {
            let kind = op.kind().map(OpKind::name).unwrap_or("leaf");
            return Err(TensorError::NonFinite { op: kind });
        }
        self.work += value.len() as u64;
        self.nodes.push(Node {
            value,
            op,
            tracked,
            param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.work += (m * k * n) as u64;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            tracked,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(a),
            tracked,
        )
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(TensorError::Shape {
                op: kind.name(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let out = match kind {
            OpKind::Add => broadcast_zip(av.data(), bv, |x, y| x + y),
            OpKind::Sub => broadcast_zip(av.data(), bv, |x, y| x - y),
            _ => broadcast_zip(av.data(), bv, |x, y| x * y),
        };
        let shape = av.shape().to_vec();
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::from_parts(shape, out), op, tracked)
    }

    /// `a + b`; `b` may be a single row broadcast over the leading dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b)
    }

    fn unary(&mut self, kind: OpKind, a: Var) -> Result<Var> {
        let av = self.value(a);
        let f: fn(T) -> T = match kind {
            OpKind::Relu => |x| if x > T::ZERO { x } else { T::ZERO },
            OpKind::Sigmoid => |x| x.sigmoid(),
            _ => |x| x.tanh(),
        };
        let out = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let op = match kind {
            OpKind::Relu => Op::Relu(a),
            OpKind::Sigmoid => Op::Sigmoid(a),
            _ => Op::Tanh(a),
        };
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(shape, out), op, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Tanh, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let av = self.value(a);
        let st = T::from_f64(s);
        let out = av.data().iter().map(|&x| x * st).collect();
        let shape = av.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, s), tracked)
    }

    /// Softmax over the last dimension. Entries at the mask sentinel come out
    /// as exactly zero; a slice with every entry masked is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.dims2();
        if cols == 0 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: "last dimension is empty".into(),
            });
        }
        let out = softmax_rows(av.data(), rows, cols)?;
        let shape = av.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), tracked)
    }

    /// Replaces every entry strictly above the diagonal with the mask sentinel.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims("causal_mask", a)?;
        let mut out = self.value(a).data().to_vec();
        let sentinel = T::from_f64(MASK_SENTINEL);
        for i in 0..r {
            for j in (i + 1)..c {
                out[i * c + j] = sentinel;
            }
        }
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::CausalMask(a),
            tracked,
        )
    }

    /// Concatenates along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no parts".into(),
        })?;
        let (rows, _) = self.mat_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no parts".into(),
        })?;
        let (_, cols) = self.mat_dims("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.mat_dims("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            tracked,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat_dims("slice_rows", a)?;
        if start + len > r || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {r}", start + len),
            });
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows { src: a, start },
            tracked,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat_dims("slice_cols", a)?;
        if start + len > c || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of range for {c}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { src: a, start },
            tracked,
        )
    }

    /// Picks rows of a table (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims("gather", table)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("row {bad} out of range for table with {r} rows"),
            });
        }
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: "no rows requested".into(),
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(table);
        self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            tracked,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).data().to_vec();
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Reshape(a),
            tracked,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat_dims("cross_entropy", logits)?;
        if rows != targets.len() || targets.iter().any(|&t| t >= cols) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} targets for {rows}x{cols} logits", targets.len()),
            });
        }
        let data = self.value(logits).data();
        let mut total = T::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let row = &data[i * cols..(i + 1) * cols];
            let mx = row.iter().fold(row[0], |m, &v| m.max(v));
            let lse = row.iter().fold(T::ZERO, |s, &v| s + (v - mx).exp()).ln() + mx;
            total += lse - row[t];
        }
        let loss = total / T::from_f64(rows as f64);
        let tracked = self.tracked(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            tracked,
        )
    }

    /// Reverse sweep from a scalar loss. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::ONE));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if node.op.kind() == self.fault {
                let half = T::from_f64(0.5);
                g.data_mut().iter_mut().for_each(|v| *v *= half);
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.param {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                } else {
                    None
                }
            })
            .collect();
        self.nodes.clear();
        self.work = 0;
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| matmul_nt_acc(gd, bd, ga, m, k, n));
                self.accumulate(grads, *b, |gb| matmul_tn_acc(ad, gd, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let bl = gb.len();
                    for chunk in gd.chunks(bl) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            if neg {
                                *x -= y;
                            } else {
                                *x += y;
                            }
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let bl = bd.len();
                self.accumulate(grads, *a, |ga| {
                    for (gx, gy) in ga.chunks_mut(bl).zip(gd.chunks(bl)) {
                        for ((x, &gv), &bv) in gx.iter_mut().zip(gy).zip(bd) {
                            *x += gv * bv;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (gc, ac) in gd.chunks(bl).zip(ad.chunks(bl)) {
                        for ((x, &gv), &av) in gb.iter_mut().zip(gc).zip(ac) {
                            *x += gv * av;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gv), &yv) in ga.iter_mut().zip(gd).zip(y) {
                        if yv > T::ZERO {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gv), &yv) in ga.iter_mut().zip(gd).zip(y) {
                        *x += gv * yv * (T::ONE - yv);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gv), &yv) in ga.iter_mut().zip(gd).zip(y) {
                        *x += gv * (T::ONE - yv * yv);
                    }
                });
            }
            Op::Scale(a, s) => {
                let st = T::from_f64(*s);
                self.accumulate(grads, *a, |ga| {
                    for (x, &gv) in ga.iter_mut().zip(gd) {
                        *x += gv * st;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for ((gx, gy), yy) in
                        ga.chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols))
                    {
                        let inner = dot(gy, yy);
                        for ((x, &gv), &yv) in gx.iter_mut().zip(gy).zip(yy) {
                            *x += yv * (gv - inner);
                        }
                    }
                });
            }
            Op::CausalMask(a) => {
                let (r, c) = node.value.dims2();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..=i.min(c.saturating_sub(1)) {
                            ga[i * c + j] += gd[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            for (x, &y) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        for (x, &y) in gp.iter_mut().zip(&gd[offset..offset + len]) {
                            *x += y;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceRows { src, start } => {
                let c = self.value(*src).last_dim();
                self.accumulate(grads, *src, |gs| {
                    for (x, &y) in gs[start * c..start * c + gd.len()].iter_mut().zip(gd) {
                        *x += y;
                    }
                });
            }
            Op::SliceCols { src, start } => {
                let c = self.value(*src).last_dim();
                let (rows, w) = node.value.dims2();
                self.accumulate(grads, *src, |gs| {
                    for r in 0..rows {
                        for k in 0..w {
                            gs[r * c + start + k] += gd[r * w + k];
                        }
                    }
                });
            }
            Op::Gather { table, rows } => {
                let c = self.value(*table).last_dim();
                self.accumulate(grads, *table, |gt| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (x, &y) in gt[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&gd[k * c..(k + 1) * c])
                        {
                            *x += y;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::CrossEntropy { logits, targets } => {
                let (rows, cols) = self.value(*logits).dims2();
                let data = self.value(*logits).data();
                let scale = gd[0] / T::from_f64(rows as f64);
                self.accumulate(grads, *logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &data[i * cols..(i + 1) * cols];
                        let mx = row.iter().fold(row[0], |m, &v| m.max(v));
                        let z = row.iter().fold(T::ZERO, |s, &v| s + (v - mx).exp());
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - mx).exp() / z;
                            let target = if j == t { T::ONE } else { T::ZERO };
                            gl[i * cols + j] += scale * (p - target);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Real>(data: &[T], rows: usize, cols: usize) -> Result<Vec<T>> {
    let threshold = T::from_f64(MASK_THRESHOLD);
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let mut mx = None::<T>;
        for &v in row {
            if v > threshold {
                mx = Some(mx.map_or(v, |m| m.max(v)));
            }
        }
        let mx = mx.ok_or(TensorError::DegenerateMask { slice: r })?;
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut z = T::ZERO;
        for (o, &v) in dst.iter_mut().zip(row) {
            if v > threshold {
                *o = (v - mx).exp();
                z += *o;
            }
        }
        for o in dst.iter_mut() {
            *o = *o / z;
        }
    }
    Ok(out)
}

/// `f(a, b)` element-wise, with `b` repeated over each `b.len()`-sized chunk of `a`.
fn broadcast_zip<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = vec![T::ZERO; a.len()];
    for (o, x) in out.chunks_exact_mut(b.len()).zip(a.chunks_exact(b.len())) {
        for ((o, &x), &y) in o.iter_mut().zip(x).zip(b) {
            *o = f(x, y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(out), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn binary_rejects_bad_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(a, b), Err(TensorError::Shape { .. })));
        let row = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.mul(a, row).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(t(&[1], &[3.7]));
        let s1 = tape.softmax(one).unwrap();
        assert_eq!(tape.value(s1).data(), &[1.0]);

        let zz = tape.constant(t(&[2], &[0.0, 0.0]));
        let s2 = tape.softmax(zz).unwrap();
        assert_eq!(tape.value(s2).data(), &[0.5, 0.5]);

        let masked = tape.constant(t(&[3], &[1.0, 2.0, MASK_SENTINEL]));
        let s3 = tape.softmax(masked).unwrap();
        let e = std::f64::consts::E;
        let got = tape.value(s3).data();
        assert!((got[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((got[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn fully_masked_slice_is_degenerate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(
            Tensor::from_f64(&[2, 2], &[0.0, 1.0, MASK_SENTINEL, MASK_SENTINEL]).unwrap(),
        );
        assert_eq!(
            tape.softmax(x).unwrap_err(),
            TensorError::DegenerateMask { slice: 1 }
        );
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::full(&[2, 1], 1.0));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let single = tape.concat_cols(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(tape.concat_cols(&[a, bad]).is_err());
    }

    #[test]
    fn concat_gradient_reaches_only_its_source() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.param(t(&[1, 1], &[3.0]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        let left = tape.slice_cols(c, 0, 2).unwrap();
        let loss = tape.sum(left).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());

        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert_eq!(
            tape.backward(w).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(Tensor::zeros(&[3, 2]));
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn causal_mask_blanks_the_upper_triangle() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(t(&[3, 3], &[1.0; 9]));
        let masked = tape.causal_mask(e).unwrap();
        let a = tape.softmax(masked).unwrap();
        let v = tape.value(a).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        for row in v.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let mut tape = Tape::<f32>::new();
        let big = tape.constant(Tensor::full(&[1, 1], 3.0e38));
        let err = tape.add(big, big).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "add" });
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
