//! Reverse-mode automatic differentiation on a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so the tape order is a topological order and `backward`
//! walks it once in reverse.

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::tensor::lanes;
use super::{NumericError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    GatherCols(Var, Vec<usize>),
    TakeRows(Var, Vec<usize>),
    MaskFill(Var, Vec<bool>),
    NormalizeRows(Var, Vec<T>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, detail: String) -> NumericError {
    NumericError::Shape { op, detail }
}

fn rank2(op: &'static str, t: &[usize]) -> Result<(usize, usize), NumericError> {
    match t {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected a matrix, got {other:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (k2, n) = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        let t = self.value(a).transpose()?;
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b), &[a, b])
    }

    /// `a[i, j] + row[j]`: broadcast over the leading dimension only.
    /// Accepts a rank-1 `a` of the row's width.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (m, n) = self.value(a).dims2()?;
        if self.shape(row) != [n] {
            return Err(shape_err("add_row", format!("[{m},{n}] + {:?}", self.shape(row))));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b])
    }

    /// `a[i, j] * row[j]`. Accepts a rank-1 `a` of the row's width.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (_, n) = self.value(a).dims2()?;
        if self.shape(row) != [n] {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", self.shape(a), self.shape(row))));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &g) in chunk.iter_mut().zip(r) {
                *o = *o * g;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("mul_row", Tensor::new(shape, out)?, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericError> {
        let c = T::of(c);
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(a, c), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let (starts, len, stride) = lanes(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for s in starts {
            let max = (0..len).map(|i| src[s + i * stride]).fold(T::neg_infinity(), T::max);
            let mut total = 0.0f64;
            for i in 0..len {
                let e = (src[s + i * stride] - max).exp();
                out[s + i * stride] = e;
                total += e.f64();
            }
            let inv = T::of(1.0 / total);
            for i in 0..len {
                out[s + i * stride] = out[s + i * stride] * inv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(x, axis), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let (starts, len, stride) = lanes(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for s in starts {
            let max = (0..len).map(|i| src[s + i * stride]).fold(T::neg_infinity(), T::max);
            let total: f64 = (0..len).map(|i| (src[s + i * stride] - max).exp().f64()).sum();
            let lse = max + T::of(total.ln());
            for i in 0..len {
                out[s + i * stride] = src[s + i * stride] - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", Tensor::new(shape, out)?, Op::LogSoftmax(x, axis), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericError> {
        let out: Vec<T> = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push("log", Tensor::new(shape, out)?, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericError> {
        let out: Vec<T> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push("exp", Tensor::new(shape, out)?, Op::Exp(x), &[x])
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericError> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(NumericError::Invalid {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let total: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push("mean", Tensor::scalar(T::of(total / n as f64)), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let total: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push("sum", Tensor::scalar(T::of(total)), Op::Sum(x), &[x])
    }

    /// Picks `x[i, idx[i]]` for every row `i`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = rank2("gather_cols", self.shape(x))?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(shape_err("gather_cols", format!("{} indices into [{m},{n}]", idx.len())));
        }
        let src = self.value(x).data();
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        self.push("gather_cols", Tensor::vector(out), Op::GatherCols(x, idx.to_vec()), &[x])
    }

    /// Row lookup `table[idx[i], :]` (embedding gather).
    pub fn take_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, NumericError> {
        let (r, c) = rank2("take_rows", self.shape(table))?;
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("take_rows", format!("row {bad} out of {r}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            "take_rows",
            Tensor::new(vec![idx.len(), c], out)?,
            Op::TakeRows(table, idx.to_vec()),
            &[table],
        )
    }

    /// Replaces entries where `mask` is true by `value`; no gradient flows through them.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var, NumericError> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("mask_fill", format!("mask {} vs {}", mask.len(), self.value(x).len())));
        }
        let fill = T::of(value);
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("mask_fill", Tensor::new(shape, out)?, Op::MaskFill(x, mask.to_vec()), &[x])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, NumericError> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = T::of((v.f64() - mean) * r);
            }
            inv_std.push(T::of(r));
        }
        let shape = self.shape(x).to_vec();
        self.push("normalize_rows", Tensor::new(shape, out)?, Op::NormalizeRows(x, inv_std), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (m, n) = rank2("slice_cols", self.shape(x))?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push("slice_cols", Tensor::new(vec![m, len], out)?, Op::SliceCols(x, start), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (m, n) = rank2("slice_rows", self.shape(x))?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("{start}..{} of {m}", start + len)));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", Tensor::new(vec![len, n], out)?, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let (m, _) = rank2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = rank2("concat_cols", self.shape(p))?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row count {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Reverse pass from a scalar `root`. Each node is visited once, in
    /// reverse tape order; fan-out contributions are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericError> {
        if self.value(root).len() != 1 {
            return Err(NumericError::NotScalar(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.needs_grad => Tensor::new(n.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NumericError> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rank2("matmul", self.shape(*a))?;
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    accumulate(grads, *a, self.value(*a).len(), |da| matmul_nt(g, bv, da, m, n, k));
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    accumulate(grads, *b, k * n, |db| matmul_tn(av, g, db, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rank2("transpose", self.shape(*a))?;
                accumulate(grads, *a, r * c, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.needs(p) {
                        accumulate(grads, p, g.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::AddRow(a, row) => {
                let n = self.shape(*row)[0];
                if self.needs(*a) {
                    accumulate(grads, *a, g.len(), |d| add_into(d, g));
                }
                if self.needs(*row) {
                    accumulate(grads, *row, n, |d| {
                        for chunk in g.chunks(n) {
                            add_into(d, chunk);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for ((d, &g), &b) in d.iter_mut().zip(g).zip(bv) {
                            *d += g * b;
                        }
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for ((d, &g), &a) in d.iter_mut().zip(g).zip(av) {
                            *d += g * a;
                        }
                    });
                }
            }
            Op::MulRow(a, row) => {
                let n = self.shape(*row)[0];
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                if self.needs(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for (dc, gc) in d.chunks_mut(n).zip(g.chunks(n)) {
                            for ((d, &g), &r) in dc.iter_mut().zip(gc).zip(rv) {
                                *d += g * r;
                            }
                        }
                    });
                }
                if self.needs(*row) {
                    accumulate(grads, *row, n, |d| {
                        for (gc, ac) in g.chunks(n).zip(av.chunks(n)) {
                            for ((d, &g), &a) in d.iter_mut().zip(gc).zip(ac) {
                                *d += g * a;
                            }
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.len(), |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g * *c;
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let (starts, len, stride) = lanes(self.shape(*x), *axis)?;
                accumulate(grads, *x, g.len(), |d| {
                    for s in starts {
                        let dot: f64 = (0..len).map(|i| (g[s + i * stride] * y[s + i * stride]).f64()).sum();
                        let dot = T::of(dot);
                        for i in 0..len {
                            let k = s + i * stride;
                            d[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let (starts, len, stride) = lanes(self.shape(*x), *axis)?;
                accumulate(grads, *x, g.len(), |d| {
                    for s in starts {
                        let total: f64 = (0..len).map(|i| g[s + i * stride].f64()).sum();
                        let total = T::of(total);
                        for i in 0..len {
                            let k = s + i * stride;
                            d[k] += g[k] - y[k].exp() * total;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.len(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / x;
                    }
                });
            }
            Op::Exp(x) => {
                accumulate(grads, *x, g.len(), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.len(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let share = g[0] / T::of(n as f64);
                accumulate(grads, *x, n, |d| d.iter_mut().for_each(|d| *d += share));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, n, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::GatherCols(x, idx) => {
                let (_, n) = rank2("gather_cols", self.shape(*x))?;
                accumulate(grads, *x, self.value(*x).len(), |d| {
                    for (i, (&j, &g)) in idx.iter().zip(g).enumerate() {
                        d[i * n + j] += g;
                    }
                });
            }
            Op::TakeRows(table, idx) => {
                let (_, c) = rank2("take_rows", self.shape(*table))?;
                accumulate(grads, *table, self.value(*table).len(), |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::MaskFill(x, mask) => {
                accumulate(grads, *x, g.len(), |d| {
                    for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += g;
                        }
                    }
                });
            }
            Op::NormalizeRows(x, inv_std) => {
                let (_, n) = self.value(*x).dims2()?;
                let nf = n as f64;
                accumulate(grads, *x, g.len(), |d| {
                    for (r, &rstd) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mean_g = gr.iter().map(|v| v.f64()).sum::<f64>() / nf;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / nf;
                        for ((d, &gv), &yv) in d[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *d += T::of(rstd.f64() * (gv.f64() - mean_g - yv.f64() * mean_gy));
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (m, n) = rank2("slice_cols", self.shape(*x))?;
                let w = node.value.shape()[1];
                accumulate(grads, *x, m * n, |d| {
                    for i in 0..m {
                        add_into(&mut d[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let (m, n) = rank2("slice_rows", self.shape(*x))?;
                accumulate(grads, *x, m * n, |d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = rank2("concat_cols", self.shape(p))?;
                    if self.needs(p) {
                        accumulate(grads, p, m * w, |d| {
                            for i in 0..m {
                                add_into(&mut d[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
