//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended in
//! evaluation order, so walking the node list backwards is a reverse
//! topological traversal and each node is visited exactly once.
//!
//! All operations work on matrices (rank-1 tensors are a single row).
//! Broadcasting is limited to adding a row vector to every row of a matrix.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction / normalization axis of a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Down each column; the result is a single row.
    Rows,
    /// Along each row; the result is a single column.
    Cols,
}

const LN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Exp(Var),
    Log(Var),
    Clamp(Var, T, T),
    Gelu(Var),
    Softmax { x: Var, axis: Axis, temp: T },
    LogSoftmax { x: Var, axis: Axis, temp: T },
    LogSumExp { x: Var, axis: Axis },
    MaxAlong { x: Var, axis: Axis, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAlong { x: Var, axis: Axis },
    L2Normalize { x: Var, norms: Vec<T> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn lane_layout(rows: usize, cols: usize, axis: Axis) -> (usize, usize, usize, usize) {
    // (lane count, lane length, lane stride, element stride)
    match axis {
        Axis::Cols => (rows, cols, cols, 1),
        Axis::Rows => (cols, rows, 1, cols),
    }
}

fn reduced_shape(rows: usize, cols: usize, axis: Axis) -> Vec<usize> {
    match axis {
        Axis::Cols => vec![rows, 1],
        Axis::Rows => vec![1, cols],
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) || self.value(a).len() != self.value(b).len() {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let mut data = self.data(a).to_vec();
        let r = self.data(row);
        for i in 0..m {
            for (x, &y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x = *x + y;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: Axis, temp: T) -> Result<Var> {
        let value = self.softmax_value(x, axis, temp, false)?;
        Ok(self.push(value, Op::Softmax { x, axis, temp }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: Axis, temp: T) -> Result<Var> {
        let value = self.softmax_value(x, axis, temp, true)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis, temp }, &[x]))
    }

    fn softmax_value(&self, x: Var, axis: Axis, temp: T, log: bool) -> Result<Tensor<T>> {
        if !(temp > T::zero()) {
            return Err(Error::Config(format!("softmax temperature must be positive, got {temp}")));
        }
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (m, n) = src.dims2();
        let (lanes, len, ls, es) = lane_layout(m, n, axis);
        let xs = src.data();
        let mut out = vec![T::zero(); m * n];
        for l in 0..lanes {
            let base = l * ls;
            let mut mx = T::neg_infinity();
            for k in 0..len {
                mx = mx.max(xs[base + k * es]);
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = ((xs[base + k * es] - mx) / temp).exp();
                out[base + k * es] = e;
                total = total + e;
            }
            if log {
                let lt = total.ln();
                for k in 0..len {
                    out[base + k * es] = (xs[base + k * es] - mx) / temp - lt;
                }
            } else {
                for k in 0..len {
                    out[base + k * es] = out[base + k * es] / total;
                }
            }
        }
        Tensor::new(src.shape().to_vec(), out)
    }

    pub fn log_sum_exp(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::NonFinite("log_sum_exp input".into()));
        }
        let (m, n) = src.dims2();
        let (lanes, len, ls, es) = lane_layout(m, n, axis);
        let xs = src.data();
        let mut out = Vec::with_capacity(lanes);
        for l in 0..lanes {
            let base = l * ls;
            let mut mx = T::neg_infinity();
            for k in 0..len {
                mx = mx.max(xs[base + k * es]);
            }
            let s: T = (0..len).map(|k| (xs[base + k * es] - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        let value = Tensor::new(reduced_shape(m, n, axis), out)?;
        Ok(self.push(value, Op::LogSumExp { x, axis }, &[x]))
    }

    /// Maximum along `axis` with the winning indices; ties go to the lowest index.
    pub fn max_along(&mut self, x: Var, axis: Axis) -> Result<(Var, Vec<usize>)> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        let (lanes, len, ls, es) = lane_layout(m, n, axis);
        let xs = src.data();
        let mut out = Vec::with_capacity(lanes);
        let mut idx = Vec::with_capacity(lanes);
        for l in 0..lanes {
            let base = l * ls;
            let mut best = 0;
            for k in 1..len {
                if xs[base + k * es] > xs[base + best * es] {
                    best = k;
                }
            }
            out.push(xs[base + best * es]);
            idx.push(best);
        }
        let value = Tensor::new(reduced_shape(m, n, axis), out)?;
        let v = self.push(
            value,
            Op::MaxAlong {
                x,
                axis,
                idx: idx.clone(),
            },
            &[x],
        );
        Ok((v, idx))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn sum_along(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        let (lanes, len, ls, es) = lane_layout(m, n, axis);
        let xs = src.data();
        let out = (0..lanes)
            .map(|l| (0..len).map(|k| xs[l * ls + k * es]).sum())
            .collect();
        let value = Tensor::new(reduced_shape(m, n, axis), out)?;
        Ok(self.push(value, Op::SumAlong { x, axis }, &[x]))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        let mut data = src.data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("row {i} of l2_normalize_rows input")));
            }
            if norm.as_f64() <= NORM_EPS {
                return Err(Error::DegenerateRow {
                    row: i,
                    norm: norm.as_f64(),
                });
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of row width).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n {
            return Err(Error::dim("layer_norm gain", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).len() != n {
            return Err(Error::dim("layer_norm bias", self.shape(x), self.shape(bias)));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let nf = T::of(n as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); m * n];
        let mut out = vec![T::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
            inv_std.push(is);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let value = Tensor::matrix(m, len, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                shape: vec![],
                reason: "concat of zero tensors".into(),
            });
        };
        let m = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let w = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        self.backward_scaled(output, T::one())
    }

    /// Reverse pass seeded with `seed` instead of 1.
    pub fn backward_scaled(&self, output: Var, seed: T) -> Result<Grads<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape {
                shape: self.shape(output).to_vec(),
                reason: "backward needs a scalar output".into(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(vec![seed]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape"))
            })
            .collect();
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let da = self.slot(grads, *a);
                    gemm_nt(g, self.data(*b), da, m, n, k);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let db = self.slot(grads, *b);
                    gemm_tn(self.data(*a), g, db, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.requires_grad(*a) {
                    // dA = G · B
                    let da = self.slot(grads, *a);
                    gemm_nn(g, self.data(*b), da, m, n, k);
                }
                if self.requires_grad(*b) {
                    // dB = Gᵀ · A
                    let db = self.slot(grads, *b);
                    gemm_tn(g, self.data(*a), db, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                let da = self.slot(grads, *a);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|&v| -v));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.iter().copied());
                if self.requires_grad(*row) {
                    let n = self.dims(*a).1;
                    let dr = self.slot(grads, *row);
                    for chunk in g.chunks(n) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi));
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai));
            }
            Op::Affine(x, s) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *s));
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi));
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(&gi, &xi)| gi / xi));
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.data(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&gi, &xi)| {
                        if xi < *lo || xi > *hi {
                            T::zero()
                        } else {
                            gi
                        }
                    }),
                );
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(&gi, &xi)| gi * gelu_grad(xi)));
            }
            Op::Softmax { x, axis, temp } => {
                let (m, n) = self.dims(*x);
                let (lanes, len, ls, es) = lane_layout(m, n, *axis);
                let mut dx = vec![T::zero(); m * n];
                for l in 0..lanes {
                    let base = l * ls;
                    let dot: T = (0..len).map(|k| g[base + k * es] * y[base + k * es]).sum();
                    for k in 0..len {
                        let p = base + k * es;
                        dx[p] = y[p] * (g[p] - dot) / *temp;
                    }
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::LogSoftmax { x, axis, temp } => {
                let (m, n) = self.dims(*x);
                let (lanes, len, ls, es) = lane_layout(m, n, *axis);
                let mut dx = vec![T::zero(); m * n];
                for l in 0..lanes {
                    let base = l * ls;
                    let gs: T = (0..len).map(|k| g[base + k * es]).sum();
                    for k in 0..len {
                        let p = base + k * es;
                        dx[p] = (g[p] - y[p].exp() * gs) / *temp;
                    }
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::LogSumExp { x, axis } => {
                let (m, n) = self.dims(*x);
                let (lanes, len, ls, es) = lane_layout(m, n, *axis);
                let xv = self.data(*x);
                let mut dx = vec![T::zero(); m * n];
                for l in 0..lanes {
                    let base = l * ls;
                    for k in 0..len {
                        let p = base + k * es;
                        dx[p] = g[l] * (xv[p] - y[l]).exp();
                    }
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::MaxAlong { x, axis, idx } => {
                let (m, n) = self.dims(*x);
                let (_, _, ls, es) = lane_layout(m, n, *axis);
                let dx = self.slot(grads, *x);
                for (l, &k) in idx.iter().enumerate() {
                    let p = l * ls + k * es;
                    dx[p] = dx[p] + g[l];
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.accumulate(grads, *x, std::iter::repeat_n(g[0], len));
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let v = g[0] / T::of(len as f64);
                self.accumulate(grads, *x, std::iter::repeat_n(v, len));
            }
            Op::SumAlong { x, axis } => {
                let (m, n) = self.dims(*x);
                let (lanes, len, ls, es) = lane_layout(m, n, *axis);
                let dx = self.slot(grads, *x);
                for l in 0..lanes {
                    for k in 0..len {
                        let p = l * ls + k * es;
                        dx[p] = dx[p] + g[l];
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let (m, n) = self.dims(*x);
                let dx = self.slot(grads, *x);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = dx[i * n + j] + (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.data(*gain);
                if self.requires_grad(*x) {
                    let nf = T::of(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            dx[i * n + j] = inv_std[i] * (dh - s1 / nf - xhat[i * n + j] * s2 / nf);
                        }
                    }
                    self.accumulate(grads, *x, dx.into_iter());
                }
                if self.requires_grad(*gain) {
                    let dg = self.slot(grads, *gain);
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let db = self.slot(grads, *bias);
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let w = node.value.cols();
                let dx = self.slot(grads, *x);
                for i in 0..m {
                    for j in 0..w {
                        let p = i * n + start + j;
                        dx[p] = dx[p] + g[i * w + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.requires_grad(p) {
                        let dp = self.slot(grads, p);
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] = dp[i * w + j] + g[i * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, upd: impl Iterator<Item = T>) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = self.slot(grads, v);
        for (d, u) in slot.iter_mut().zip(upd) {
            *d = *d + u;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
