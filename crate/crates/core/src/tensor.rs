//! Dense row-major tensors and a reverse-mode tape.
//!
//! Every differentiable computation in the crate is recorded on a [`Tape`]:
//! leaves are either trainable parameters or constants, interior nodes keep
//! whatever the reverse pass needs, and [`Tape::backward`] walks the record
//! from the output back to index zero.
//!
//! Binary elementwise operations accept operands of identical shape, or one
//! operand holding a single element (a scalar), which is broadcast. Bias
//! addition over a batch is a separate, explicit operation
//! ([`Tape::add_row`]); there is no other broadcasting.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(op, &t.shape, &[0, 0]));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    const R: usize = 2;
    const C: usize = 8;
    let mut out = vec![0.0; m * n];
    let full_cols = n - n % C;
    let full_rows = m - m % R;
    // Register-blocked tiles; every output still sums over `p` in order.
    for i in (0..full_rows).step_by(R) {
        for j in (0..full_cols).step_by(C) {
            let mut acc = [[0.0f64; C]; R];
            for p in 0..k {
                let b_tile = &b[p * n + j..p * n + j + C];
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (o, &bv) in acc_row.iter_mut().zip(b_tile) {
                        *o += av * bv;
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + C].copy_from_slice(acc_row);
            }
        }
    }
    let edge = |out: &mut [f64], i: usize, cols: std::ops::Range<usize>| {
        for j in cols {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    };
    for i in 0..full_rows {
        edge(&mut out, i, full_cols..n);
    }
    for i in full_rows..m {
        edge(&mut out, i, 0..n);
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_raw(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut at = vec![0.0; m * k];
    for p in 0..k {
        for i in 0..m {
            at[i * k + p] = a[p * m + i];
        }
    }
    matmul_raw(&at, b, m, k, n)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Unary(Unary, Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    MaxPoolRows { input: Var, argmax: Vec<usize> },
    MaxOf { inputs: Vec<Var>, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    SumCols(Var),
    LogSumExpRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Linear record of the forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for constants and for nodes the output
    /// does not depend on through a trainable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Node indices in the order the reverse pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    /// Test hook: perturbs a stored gradient in place.
    pub fn corrupt(&mut self, v: Var, delta: f64) {
        if let Some(Some(g)) = self.grads.get_mut(v.0) {
            for x in g.data_mut() {
                *x += delta;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`, cutting it out of the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_trainable_leaf(&self, v: Var) -> bool {
        let n = &self.nodes[v.0];
        n.tracked && matches!(n.op, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul", self.value(a))?;
        let (k2, n) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_matrix("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Transpose(a), tracked))
    }

    pub fn binary(&mut self, f: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape == vb.shape {
            va.shape.clone()
        } else if vb.is_scalar() {
            va.shape.clone()
        } else if va.is_scalar() {
            vb.shape.clone()
        } else {
            return Err(Error::shape("elementwise", va.shape(), vb.shape()));
        };
        let n: usize = shape.iter().product();
        let get = |t: &Tensor, i: usize| if t.is_scalar() { t.data[0] } else { t.data[i] };
        let data = (0..n)
            .map(|i| {
                let (x, y) = (get(va, i), get(vb, i));
                match f {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor { shape, data }, Op::Binary(f, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, s), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let tracked = self.tracked(a);
        self.push(value, Op::AddScalar(a), tracked)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = require_matrix("add_row", self.value(x))?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut data = self.value(x).data.clone();
        let b = &self.value(bias).data;
        for i in 0..m {
            for (d, bv) in data[i * n..(i + 1) * n].iter_mut().zip(b) {
                *d += bv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::AddRow(x, bias), tracked))
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Result<Var> {
        let va = self.value(a);
        if f == Unary::Log {
            if let Some(&bad) = va.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain { op: "log", value: bad });
            }
        }
        let value = match f {
            Unary::Tanh => va.map(f64::tanh),
            Unary::Sigmoid => va.map(sigmoid),
            Unary::Exp => va.map(f64::exp),
            Unary::Log => va.map(f64::ln),
            Unary::Softplus => va.map(softplus),
        };
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Unary(f, a), tracked))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a).expect("softplus is total")
    }

    /// Scales a vector, or every row of a matrix, to unit L2 norm.
    ///
    /// A zero vector (or row) is rejected rather than padded with an epsilon.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = match va.shape.len() {
            1 => (1, va.shape[0]),
            2 => (va.shape[0], va.shape[1]),
            _ => return Err(Error::shape("l2_normalize", va.shape(), &[0])),
        };
        let mut data = va.data.clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: format!("row {r} has norm {norm}"),
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::L2Normalize { input: a, norms }, tracked))
    }

    /// Column-wise maximum over the rows of an `L×d` matrix. Ties go to the
    /// earliest row.
    pub fn max_pool_over_time(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (l, d) = require_matrix("max_pool_over_time", va)?;
        if l == 0 {
            return Err(Error::EmptySequence("max_pool_over_time"));
        }
        let mut argmax = vec![0usize; d];
        let mut out = va.data[..d].to_vec();
        for t in 1..l {
            for j in 0..d {
                let v = va.data[t * d + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = t;
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::vector(out), Op::MaxPoolRows { input: a, argmax }, tracked))
    }

    /// Elementwise maximum across same-shape tensors (the batched form of
    /// max pooling over time). Ties go to the earliest input.
    pub fn max_of(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptySequence("max_of"))?;
        let shape = self.value(*first).shape.clone();
        let mut out = self.value(*first).data.clone();
        let mut argmax = vec![0usize; out.len()];
        for (t, v) in inputs.iter().enumerate().skip(1) {
            let vt = self.value(*v);
            if vt.shape != shape {
                return Err(Error::shape("max_of", &shape, vt.shape()));
            }
            for (j, &x) in vt.data.iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = t;
                }
            }
        }
        let tracked = inputs.iter().any(|v| self.tracked(*v));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MaxOf {
                inputs: inputs.to_vec(),
                argmax,
            },
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let (m, _) = require_matrix("concat_cols", self.value(*first))?;
        let mut total = 0;
        for v in inputs {
            let (r, c) = require_matrix("concat_cols", self.value(*v))?;
            if r != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), self.value(*v).shape()));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in inputs {
                data.extend_from_slice(self.value(*v).row(i));
            }
        }
        let tracked = inputs.iter().any(|v| self.tracked(*v));
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            Op::ConcatCols(inputs.to_vec()),
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptySequence("concat_rows"))?;
        let (_, n) = require_matrix("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for v in inputs {
            let (r, c) = require_matrix("concat_rows", self.value(*v))?;
            if c != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), self.value(*v).shape()));
            }
            rows += r;
            data.extend_from_slice(self.value(*v).data());
        }
        let tracked = inputs.iter().any(|v| self.tracked(*v));
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
            },
            Op::ConcatRows(inputs.to_vec()),
            tracked,
        ))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = require_matrix("select_rows", va)?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::shape("select_rows", va.shape(), &[i]));
            }
            data.extend_from_slice(va.row(i));
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), n],
                data,
            },
            Op::SelectRows(a, indices.to_vec()),
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// Per-row sums of an `m×n` matrix, as `m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_matrix("sum_cols", self.value(a))?;
        let va = self.value(a);
        let data = (0..m).map(|i| va.data[i * n..(i + 1) * n].iter().sum()).collect();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor { shape: vec![m, 1], data }, Op::SumCols(a), tracked))
    }

    /// Per-row `log Σ exp`, as `m×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_matrix("logsumexp_rows", self.value(a))?;
        if n == 0 {
            return Err(Error::EmptySequence("logsumexp_rows"));
        }
        let va = self.value(a);
        let data = (0..m)
            .map(|i| {
                let row = &va.data[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor { shape: vec![m, 1], data }, Op::LogSumExpRows(a), tracked))
    }

    /// Reverse pass from a one-element output.
    ///
    /// Every trainable leaf ends up with a gradient of its own shape (zeros
    /// when the output does not depend on it); constants get none.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::shape("backward", out.value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if out.tracked {
            grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.propagate(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                if self.tracked(*a) {
                    let da = matmul_nt_raw(&g.data, &vb.data, m, n, k);
                    self.accumulate(grads, *a, Tensor { shape: vec![m, k], data: da });
                }
                if self.tracked(*b) {
                    let db = matmul_tn_raw(&va.data, &g.data, m, k, n);
                    self.accumulate(grads, *b, Tensor { shape: vec![k, n], data: db });
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Binary(f, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let get = |t: &Tensor, i: usize| if t.is_scalar() { t.data[0] } else { t.data[i] };
                let reduce = |t: &Tensor, full: Vec<f64>| {
                    if t.shape != g.shape {
                        Tensor {
                            shape: t.shape.clone(),
                            data: vec![full.iter().sum()],
                        }
                    } else {
                        Tensor {
                            shape: t.shape.clone(),
                            data: full,
                        }
                    }
                };
                let n = g.numel();
                if self.tracked(*a) {
                    let full: Vec<f64> = match f {
                        Binary::Add | Binary::Sub => g.data.clone(),
                        Binary::Mul => (0..n).map(|i| g.data[i] * get(vb, i)).collect(),
                    };
                    self.accumulate(grads, *a, reduce(va, full));
                }
                if self.tracked(*b) {
                    let full: Vec<f64> = match f {
                        Binary::Add => g.data.clone(),
                        Binary::Sub => g.data.iter().map(|v| -v).collect(),
                        Binary::Mul => (0..n).map(|i| g.data[i] * get(va, i)).collect(),
                    };
                    self.accumulate(grads, *b, reduce(vb, full));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*bias) {
                    let n = g.shape[1];
                    let mut db = vec![0.0; n];
                    for row in g.data.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape.clone();
                    self.accumulate(grads, *bias, Tensor { shape, data: db });
                }
            }
            Op::Unary(f, a) => {
                let x = self.value(*a);
                let data = match f {
                    Unary::Tanh => g.data.iter().zip(&y.data).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Sigmoid => g.data.iter().zip(&y.data).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Exp => g.data.iter().zip(&y.data).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.data.iter().zip(&x.data).map(|(g, x)| g / x).collect(),
                    Unary::Softplus => g.data.iter().zip(&x.data).map(|(g, x)| g * sigmoid(*x)).collect(),
                };
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::L2Normalize { input, norms } => {
                let cols = y.cols();
                let mut data = vec![0.0; y.numel()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        data[r * cols + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(
                    grads,
                    *input,
                    Tensor {
                        shape: y.shape.clone(),
                        data,
                    },
                );
            }
            Op::MaxPoolRows { input, argmax } => {
                let x = self.value(*input);
                let d = x.shape[1];
                let mut data = vec![0.0; x.numel()];
                for (j, &t) in argmax.iter().enumerate() {
                    data[t * d + j] = g.data[j];
                }
                self.accumulate(
                    grads,
                    *input,
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::MaxOf { inputs, argmax } => {
                for (t, v) in inputs.iter().enumerate() {
                    if !self.tracked(*v) {
                        continue;
                    }
                    let data = argmax
                        .iter()
                        .zip(&g.data)
                        .map(|(&a, &gv)| if a == t { gv } else { 0.0 })
                        .collect();
                    self.accumulate(
                        grads,
                        *v,
                        Tensor {
                            shape: g.shape.clone(),
                            data,
                        },
                    );
                }
            }
            Op::ConcatCols(inputs) => {
                let (m, total) = (g.shape[0], g.shape[1]);
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(*v).shape[1];
                    if self.tracked(*v) {
                        let mut data = Vec::with_capacity(m * c);
                        for i in 0..m {
                            data.extend_from_slice(&g.data[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, *v, Tensor { shape: vec![m, c], data });
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(inputs) => {
                let n = g.shape[1];
                let mut offset = 0;
                for v in inputs {
                    let r = self.value(*v).shape[0];
                    if self.tracked(*v) {
                        let data = g.data[offset * n..(offset + r) * n].to_vec();
                        self.accumulate(grads, *v, Tensor { shape: vec![r, n], data });
                    }
                    offset += r;
                }
            }
            Op::SelectRows(a, indices) => {
                let x = self.value(*a);
                let n = x.shape[1];
                let mut data = vec![0.0; x.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        data[i * n + j] += g.data[k * n + j];
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.data[0]));
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let n = x.shape[1];
                let data = g.data.iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let n = x.shape[1];
                let mut data = vec![0.0; x.numel()];
                for (i, (&gv, &lse)) in g.data.iter().zip(&y.data).enumerate() {
                    for j in 0..n {
                        data[i * n + j] = gv * (x.data[i * n + j] - lse).exp();
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
        }
    }
}
