//! Define-by-run reverse-mode automatic differentiation over dense 2-D matrices.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a node
//! holding its value and enough context for the backward rule; inputs always
//! precede outputs, so the node list is already in topological order and the
//! backward sweep simply walks it in reverse. All arithmetic is `f64` with a
//! fixed reduction order, so a forward pass is bit-deterministic.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::AutodiffError;
use crate::math;

/// Value written by [`Graph::masked_fill`] before a softmax.
pub const MASK_FILL: f64 = -1.0e9;

/// Dense row-major matrix. Scalars are `1 × 1`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::InvalidArgument("from_rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `1 × cols`
    Row,
    /// rhs is `rows × 1`
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Tensor, Tensor),
    Binary(BinOp, Tensor, Tensor, Bcast),
    Affine(Tensor, f64),
    Sigmoid(Tensor),
    Relu(Tensor),
    Softmax(Tensor),
    LayerNorm(Tensor, Vec<f64>),
    L2Normalize(Tensor, Vec<f64>),
    Concat(Vec<Tensor>, Axis),
    Slice(Tensor, Axis, usize),
    Sum(Tensor),
    SumAxis(Tensor, Axis),
    Transpose(Tensor),
    Reshape(Tensor),
    MaskedFill(Tensor, Vec<bool>),
    SigmoidFocal { x: Tensor, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients of every parameter touched by a graph, indexed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds `other` elementwise. Accumulating in a fixed order keeps sums deterministic.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self.grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
        math::sqrt(sq)
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// A tape for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<usize, Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: vec![a.rows, a.cols], rhs: vec![b.rows, b.cols] }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_nodes: BTreeMap::new(), grads: Vec::new(), backpropagated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node { value, op, requires_grad });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> [usize; 2] {
        self.nodes[t.0].value.shape()
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value.data[0]
    }

    /// A constant input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is recorded by [`Graph::backward`].
    pub fn input(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Tensor {
        if let Some(&t) = self.param_nodes.get(&id.0) {
            return t;
        }
        let t = self.push(store.values[id.0].clone(), Op::Param, true);
        self.param_nodes.insert(id.0, t);
        t
    }

    /// Gradient of an input or parameter node after [`Graph::backward`].
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols != bv.rows {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = vec![0.0; m * n];
        matmul_into(&av.data, &bv.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Matrix { rows: m, cols: n, data: out }, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: BinOp, a: Tensor, b: Tensor, name: &'static str) -> Result<Tensor, AutodiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = if av.shape() == bv.shape() {
            Bcast::Same
        } else if bv.rows == 1 && bv.cols == 1 {
            Bcast::Scalar
        } else if bv.rows == 1 && bv.cols == av.cols {
            Bcast::Row
        } else if bv.cols == 1 && bv.rows == av.rows {
            Bcast::Col
        } else {
            return Err(mismatch(name, av, bv));
        };
        let (rows, cols) = (av.rows, av.cols);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = av.data[r * cols + c];
                let y = match bc {
                    Bcast::Same => bv.data[r * cols + c],
                    Bcast::Row => bv.data[c],
                    Bcast::Col => bv.data[r],
                    Bcast::Scalar => bv.data[0],
                };
                out.push(match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Matrix { rows, cols, data: out }, Op::Binary(op, a, b, bc), rg))
    }

    /// Elementwise sum; `b` may also be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.binary(BinOp::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.binary(BinOp::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.binary(BinOp::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.binary(BinOp::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        self.affine(a, factor, 0.0)
    }

    /// `factor · a + offset`
    pub fn affine(&mut self, a: Tensor, factor: f64, offset: f64) -> Tensor {
        let v = &self.nodes[a.0].value;
        let data = v.data.iter().map(|x| factor * x + offset).collect();
        let value = Matrix { rows: v.rows, cols: v.cols, data };
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let v = &self.nodes[a.0].value;
        let data = v.data.iter().map(|&x| math::sigmoid(x)).collect();
        let value = Matrix { rows: v.rows, cols: v.cols, data };
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = &self.nodes[a.0].value;
        let data = v.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Matrix { rows: v.rows, cols: v.cols, data };
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    fn softmax_rows(&mut self, a: Tensor) -> Tensor {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = (v.rows, v.cols);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v.data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = math::exp(x - max);
                sum += *o;
            }
            data[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o /= sum);
        }
        let rg = self.rg(a);
        self.push(Matrix { rows, cols, data }, Op::Softmax(a), rg)
    }

    /// Softmax along `axis`: `Cols` normalizes each row, `Rows` each column.
    pub fn softmax(&mut self, a: Tensor, axis: Axis) -> Tensor {
        match axis {
            Axis::Cols => self.softmax_rows(a),
            Axis::Rows => {
                let t = self.transpose(a);
                let s = self.softmax_rows(t);
                self.transpose(s)
            }
        }
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Tensor, eps: f64) -> Tensor {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = (v.rows, v.cols);
        let mut data = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / math::sqrt(var + eps);
            for (o, &x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(Matrix { rows, cols, data }, Op::LayerNorm(a, inv_std), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = (v.rows, v.cols);
        let mut data = vec![0.0; rows * cols];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data[r * cols..(r + 1) * cols];
            let n = math::sqrt(row.iter().map(|x| x * x).sum());
            if n == 0.0 {
                return Err(AutodiffError::ZeroNorm);
            }
            for (o, &x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x / n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        Ok(self.push(Matrix { rows, cols, data }, Op::L2Normalize(a, norms), rg))
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: Axis) -> Result<Tensor, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument("concat"))?;
        let f = &self.nodes[first.0].value;
        let (rows, cols) = (f.rows, f.cols);
        for &p in &parts[1..] {
            let pv = &self.nodes[p.0].value;
            let ok = match axis {
                Axis::Rows => pv.cols == cols,
                Axis::Cols => pv.rows == rows,
            };
            if !ok {
                return Err(mismatch("concat", f, pv));
            }
        }
        let value = match axis {
            Axis::Rows => {
                let total: usize = parts.iter().map(|p| self.nodes[p.0].value.rows).sum();
                let mut data = Vec::with_capacity(total * cols);
                for p in parts {
                    data.extend_from_slice(&self.nodes[p.0].value.data);
                }
                Matrix { rows: total, cols, data }
            }
            Axis::Cols => {
                let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.row(r));
                    }
                }
                Matrix { rows, cols: total, data }
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` consecutive rows (`Axis::Rows`) or columns (`Axis::Cols`) starting at `start`.
    pub fn slice(&mut self, a: Tensor, axis: Axis, start: usize, len: usize) -> Result<Tensor, AutodiffError> {
        let v = &self.nodes[a.0].value;
        let limit = match axis {
            Axis::Rows => v.rows,
            Axis::Cols => v.cols,
        };
        if len == 0 || start + len > limit {
            return Err(AutodiffError::InvalidArgument("slice"));
        }
        let value = match axis {
            Axis::Rows => Matrix {
                rows: len,
                cols: v.cols,
                data: v.data[start * v.cols..(start + len) * v.cols].to_vec(),
            },
            Axis::Cols => {
                let mut data = Vec::with_capacity(v.rows * len);
                for r in 0..v.rows {
                    data.extend_from_slice(&v.row(r)[start..start + len]);
                }
                Matrix { rows: v.rows, cols: len, data }
            }
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, axis, start), rg))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.nodes[a.0].value.data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reduces along `axis`: `Rows` yields a `1 × cols` row, `Cols` a `rows × 1` column.
    pub fn sum_axis(&mut self, a: Tensor, axis: Axis) -> Tensor {
        let v = &self.nodes[a.0].value;
        let value = match axis {
            Axis::Rows => {
                let mut data = vec![0.0; v.cols];
                for r in 0..v.rows {
                    for (d, x) in data.iter_mut().zip(v.row(r)) {
                        *d += x;
                    }
                }
                Matrix { rows: 1, cols: v.cols, data }
            }
            Axis::Cols => Matrix {
                rows: v.rows,
                cols: 1,
                data: (0..v.rows).map(|r| v.row(r).iter().sum()).collect(),
            },
        };
        let rg = self.rg(a);
        self.push(value, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Tensor, axis: Axis) -> Tensor {
        let [rows, cols] = self.shape(a);
        let n = match axis {
            Axis::Rows => rows,
            Axis::Cols => cols,
        };
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let v = &self.nodes[a.0].value;
        let mut data = vec![0.0; v.rows * v.cols];
        for r in 0..v.rows {
            for c in 0..v.cols {
                data[c * v.rows + r] = v.data[r * v.cols + c];
            }
        }
        let value = Matrix { rows: v.cols, cols: v.rows, data };
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Tensor, rows: usize, cols: usize) -> Result<Tensor, AutodiffError> {
        let v = &self.nodes[a.0].value;
        if rows * cols != v.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: vec![v.rows, v.cols],
                rhs: vec![rows, cols],
            });
        }
        let value = Matrix { rows, cols, data: v.data.clone() };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Replaces entries where `mask` is set with [`MASK_FILL`].
    pub fn masked_fill(&mut self, a: Tensor, mask: &[bool]) -> Result<Tensor, AutodiffError> {
        let v = &self.nodes[a.0].value;
        if mask.len() != v.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_fill",
                lhs: vec![v.rows, v.cols],
                rhs: vec![mask.len()],
            });
        }
        let data = v.data.iter().zip(mask).map(|(&x, &m)| if m { MASK_FILL } else { x }).collect();
        let value = Matrix { rows: v.rows, cols: v.cols, data };
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskedFill(a, mask.to_vec()), rg))
    }

    /// Elementwise sigmoid focal loss of logits `a` against binary `targets`.
    pub fn sigmoid_focal(&mut self, a: Tensor, targets: &[f64], alpha: f64, gamma: f64) -> Result<Tensor, AutodiffError> {
        let v = &self.nodes[a.0].value;
        if targets.len() != v.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sigmoid_focal",
                lhs: vec![v.rows, v.cols],
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(AutodiffError::InvalidArgument("sigmoid_focal targets must be 0 or 1"));
        }
        let data = v
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &y)| math::focal_from_logit(x, y, alpha, gamma))
            .collect();
        let value = Matrix { rows: v.rows, cols: v.cols, data };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SigmoidFocal { x: a, targets: targets.to_vec(), alpha, gamma }, rg))
    }

    fn acc(grads: &mut [Option<Vec<f64>>], t: Tensor, len: usize, f: impl FnOnce(&mut [f64])) {
        let g = grads[t.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    /// Back-propagates from a scalar `loss` and returns parameter gradients.
    pub fn backward(&mut self, loss: Tensor) -> Result<Gradients, AutodiffError> {
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(AutodiffError::NonScalarLoss);
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let nodes = &self.nodes;
            let len_of = |t: Tensor| nodes[t.0].value.data.len();
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    if nodes[a.0].requires_grad {
                        Self::acc(&mut grads, *a, m * k, |g| matmul_nt_into(&gout, &bv.data, g, m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        Self::acc(&mut grads, *b, k * n, |g| matmul_tn_into(&av.data, &gout, g, m, k, n));
                    }
                }
                Op::Binary(op, a, b, bc) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let cols = av.cols;
                    let bidx = |i: usize| match bc {
                        Bcast::Same => i,
                        Bcast::Row => i % cols,
                        Bcast::Col => i / cols,
                        Bcast::Scalar => 0,
                    };
                    if nodes[a.0].requires_grad {
                        Self::acc(&mut grads, *a, av.data.len(), |g| {
                            for (i, gi) in g.iter_mut().enumerate() {
                                let d = gout[i];
                                *gi += match op {
                                    BinOp::Add | BinOp::Sub => d,
                                    BinOp::Mul => d * bv.data[bidx(i)],
                                    BinOp::Div => d / bv.data[bidx(i)],
                                };
                            }
                        });
                    }
                    if nodes[b.0].requires_grad {
                        Self::acc(&mut grads, *b, bv.data.len(), |g| {
                            for (i, &d) in gout.iter().enumerate() {
                                let j = bidx(i);
                                g[j] += match op {
                                    BinOp::Add => d,
                                    BinOp::Sub => -d,
                                    BinOp::Mul => d * av.data[i],
                                    BinOp::Div => -d * av.data[i] / (bv.data[j] * bv.data[j]),
                                };
                            }
                        });
                    }
                }
                Op::Affine(a, factor) => {
                    Self::acc(&mut grads, *a, len_of(*a), |g| {
                        g.iter_mut().zip(&gout).for_each(|(gi, d)| *gi += factor * d)
                    });
                }
                Op::Sigmoid(a) => Self::acc(&mut grads, *a, len_of(*a), |g| {
                    for ((gi, d), yv) in g.iter_mut().zip(&gout).zip(&y.data) {
                        *gi += d * yv * (1.0 - yv);
                    }
                }),
                Op::Relu(a) => {
                    let x = &nodes[a.0].value.data;
                    Self::acc(&mut grads, *a, x.len(), |g| {
                        for ((gi, d), xv) in g.iter_mut().zip(&gout).zip(x) {
                            if *xv > 0.0 {
                                *gi += d;
                            }
                        }
                    })
                }
                Op::Softmax(a) => {
                    let cols = y.cols;
                    Self::acc(&mut grads, *a, y.data.len(), |g| {
                        for r in 0..y.rows {
                            let yr = &y.data[r * cols..(r + 1) * cols];
                            let dr = &gout[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                g[r * cols + c] += yr[c] * (dr[c] - dot);
                            }
                        }
                    })
                }
                Op::LayerNorm(a, inv_std) => {
                    let cols = y.cols;
                    let n = cols as f64;
                    Self::acc(&mut grads, *a, y.data.len(), |g| {
                        for r in 0..y.rows {
                            let yr = &y.data[r * cols..(r + 1) * cols];
                            let dr = &gout[r * cols..(r + 1) * cols];
                            let mean_d = dr.iter().sum::<f64>() / n;
                            let mean_dy = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() / n;
                            for c in 0..cols {
                                g[r * cols + c] += inv_std[r] * (dr[c] - mean_d - yr[c] * mean_dy);
                            }
                        }
                    })
                }
                Op::L2Normalize(a, norms) => {
                    let cols = y.cols;
                    Self::acc(&mut grads, *a, y.data.len(), |g| {
                        for r in 0..y.rows {
                            let yr = &y.data[r * cols..(r + 1) * cols];
                            let dr = &gout[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                g[r * cols + c] += (dr[c] - yr[c] * dot) / norms[r];
                            }
                        }
                    })
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &nodes[p.0].value;
                        if nodes[p.0].requires_grad {
                            Self::acc(&mut grads, *p, pv.data.len(), |g| match axis {
                                Axis::Rows => {
                                    let base = offset * pv.cols;
                                    for (gi, d) in g.iter_mut().zip(&gout[base..base + pv.data.len()]) {
                                        *gi += d;
                                    }
                                }
                                Axis::Cols => {
                                    for r in 0..pv.rows {
                                        for c in 0..pv.cols {
                                            g[r * pv.cols + c] += gout[r * y.cols + offset + c];
                                        }
                                    }
                                }
                            });
                        }
                        offset += match axis {
                            Axis::Rows => pv.rows,
                            Axis::Cols => pv.cols,
                        };
                    }
                }
                Op::Slice(a, axis, start) => {
                    let av = &nodes[a.0].value;
                    Self::acc(&mut grads, *a, av.data.len(), |g| match axis {
                        Axis::Rows => {
                            let base = start * av.cols;
                            for (gi, d) in g[base..base + gout.len()].iter_mut().zip(&gout) {
                                *gi += d;
                            }
                        }
                        Axis::Cols => {
                            for r in 0..y.rows {
                                for c in 0..y.cols {
                                    g[r * av.cols + start + c] += gout[r * y.cols + c];
                                }
                            }
                        }
                    })
                }
                Op::Sum(a) => {
                    let d = gout[0];
                    Self::acc(&mut grads, *a, len_of(*a), |g| g.iter_mut().for_each(|gi| *gi += d))
                }
                Op::SumAxis(a, axis) => {
                    let av = &nodes[a.0].value;
                    Self::acc(&mut grads, *a, av.data.len(), |g| {
                        for r in 0..av.rows {
                            for c in 0..av.cols {
                                g[r * av.cols + c] += match axis {
                                    Axis::Rows => gout[c],
                                    Axis::Cols => gout[r],
                                };
                            }
                        }
                    })
                }
                Op::Transpose(a) => {
                    let av = &nodes[a.0].value;
                    Self::acc(&mut grads, *a, av.data.len(), |g| {
                        for r in 0..av.rows {
                            for c in 0..av.cols {
                                g[r * av.cols + c] += gout[c * av.rows + r];
                            }
                        }
                    })
                }
                Op::Reshape(a) => Self::acc(&mut grads, *a, len_of(*a), |g| {
                    g.iter_mut().zip(&gout).for_each(|(gi, d)| *gi += d)
                }),
                Op::MaskedFill(a, mask) => Self::acc(&mut grads, *a, len_of(*a), |g| {
                    for ((gi, d), m) in g.iter_mut().zip(&gout).zip(mask) {
                        if !m {
                            *gi += d;
                        }
                    }
                }),
                Op::SigmoidFocal { x, targets, alpha, gamma } => {
                    let xv = &nodes[x.0].value.data;
                    Self::acc(&mut grads, *x, xv.len(), |g| {
                        for i in 0..xv.len() {
                            g[i] += gout[i] * math::focal_grad_logit(xv[i], targets[i], *alpha, *gamma);
                        }
                    })
                }
            }
            // keep the gradient of leaves and parameters for later inspection
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param) {
                grads[idx] = Some(gout);
            }
        }
        let mut out = Gradients::default();
        for (&pid, &t) in &self.param_nodes {
            if let Some(g) = &grads[t.0] {
                if out.grads.len() <= pid {
                    out.grads.resize(pid + 1, None);
                }
                out.grads[pid] = Some(g.clone());
            }
        }
        self.grads = grads;
        Ok(out)
    }
}

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Named parameters plus their AdamW moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    values: Vec<Matrix>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Matrix) -> Result<ParamId, AutodiffError> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParameter(name.to_string()));
        }
        let id = self.values.len();
        self.first_moment.push(vec![0.0; value.data.len()]);
        self.second_moment.push(vec![0.0; value.data.len()]);
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, AutodiffError> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<(), AutodiffError> {
        let id = self.id(name)?;
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(mismatch("set", cur, &value));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// One AdamW step with decoupled weight decay.
    pub fn step_adam(&mut self, grads: &Gradients, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(cfg.beta1, t);
        let bc2 = 1.0 - math::powf(cfg.beta2, t);
        for (i, value) in self.values.iter_mut().enumerate() {
            let Some(g) = grads.grads.get(i).and_then(|g| g.as_ref()) else { continue };
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for j in 0..g.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let p = &mut value.data[j];
                *p -= cfg.lr * (mhat / (math::sqrt(vhat) + cfg.eps) + cfg.weight_decay * *p);
            }
        }
    }
}

/// Relative error between an analytic and a numerical derivative. The
/// denominator never drops below 1e-6, the roundoff level of central
/// differences of an O(1) loss at step 1e-5.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares the analytic gradient of a scalar function of `inputs` with
/// central differences of step `eps`; returns the largest relative error.
pub fn grad_check<F>(f: F, inputs: &[Matrix], eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Tensor> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| g.grad(v).map_or_else(|| vec![0.0; m.data.len()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Matrix]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Tensor> = inputs.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, m) in inputs.iter().enumerate() {
        for j in 0..m.data.len() {
            let orig = m.data[j];
            work[i].data[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Like [`grad_check`] but perturbs parameters of `store`. At most
/// `per_param` entries of each parameter are probed, spread evenly.
pub fn grad_check_params<F>(
    store: &ParameterStore,
    f: F,
    eps: f64,
    per_param: usize,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Tensor, AutodiffError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (id, _, value) in store.iter() {
        let n = value.data.len();
        let probes = per_param.min(n).max(1);
        for p in 0..probes {
            let j = p * n / probes;
            let analytic = grads.get(id).map_or(0.0, |g| g[j]);
            let orig = value.data[j];
            work.values[id.0].data[j] = orig + eps;
            let mut gp = Graph::new();
            let t = f(&mut gp, &work)?;
            let plus = gp.scalar_value(t);
            work.values[id.0].data[j] = orig - eps;
            let mut gm = Graph::new();
            let t = f(&mut gm, &work)?;
            let minus = gm.scalar_value(t);
            work.values[id.0].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// `x · w + b` with `b` a row vector.
pub fn linear(g: &mut Graph, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Scaled dot-product attention with `heads` heads, head concatenation and
/// an output projection. `mask` is row-major `M × N`; a set entry hides key
/// `n` from query `m`. A row with every key hidden attends uniformly.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    mask: Option<&[bool]>,
    heads: usize,
    w: &AttentionWeights,
) -> Result<Tensor, AutodiffError> {
    let [m, d] = g.shape(queries);
    let [n, dk] = g.shape(keys);
    if heads == 0 || d % heads != 0 || dk != d {
        return Err(AutodiffError::InvalidArgument("multi_head_attention dims"));
    }
    if g.shape(values)[0] != n {
        return Err(AutodiffError::InvalidArgument("multi_head_attention key/value count"));
    }
    if let Some(mask) = mask {
        if mask.len() != m * n {
            return Err(AutodiffError::InvalidArgument("multi_head_attention mask shape"));
        }
    }
    let q = linear(g, queries, w.wq, w.bq)?;
    let k = linear(g, keys, w.wk, w.bk)?;
    let v = linear(g, values, w.wv, w.bv)?;
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, Axis::Cols, h * dh, dh)?,
                g.slice(k, Axis::Cols, h * dh, dh)?,
                g.slice(v, Axis::Cols, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if let Some(mask) = mask {
            scores = g.masked_fill(scores, mask)?;
        }
        let attn = g.softmax(scores, Axis::Cols);
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, Axis::Cols)? };
    linear(g, cat, w.wo, w.bo)
}
