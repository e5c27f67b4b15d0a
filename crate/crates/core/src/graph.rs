//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as an append-only node, so append
//! order is a valid topological order and [`Graph::backward`] simply walks
//! the tape in reverse. Graphs are rebuilt per forward pass.
//!
//! ```
//! use jcra_core::graph::Graph;
//! use jcra_core::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the recorded operations, used for diagnostics and the
/// gradient-rule fault hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Affine,
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Abs,
    Square,
    Pow,
    Clamp,
    Sum,
    Mean,
    SoftmaxRows,
    LayerNormRows,
    Reshape,
    SliceCols,
    ConcatCols,
    Gather,
    BilinearSample,
    GroupWeightedSum,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::Affine,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Pow,
        OpKind::Clamp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SoftmaxRows,
        OpKind::LayerNormRows,
        OpKind::Reshape,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::Gather,
        OpKind::BilinearSample,
        OpKind::GroupWeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::Affine => "affine",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Pow => "pow",
            OpKind::Clamp => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNormRows => "layer_norm_rows",
            OpKind::Reshape => "reshape",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Gather => "gather",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::GroupWeightedSum => "group_weighted_sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .iter()
            .copied()
            .chain([OpKind::Leaf, OpKind::Constant])
            .find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    BilinearSample(Var, Var),
    GroupWeightedSum(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Affine(..) => OpKind::Affine,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Ln(..) => OpKind::Ln,
            Op::Abs(..) => OpKind::Abs,
            Op::Square(..) => OpKind::Square,
            Op::Pow(..) => OpKind::Pow,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNormRows(..) => OpKind::LayerNormRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Gather(..) => OpKind::Gather,
            Op::BilinearSample(..) => OpKind::BilinearSample,
            Op::GroupWeightedSum(..) => OpKind::GroupWeightedSum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::BilinearSample(a, b)
            | Op::GroupWeightedSum(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Pow(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::Reshape(a)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of differentiable operations.
///
/// Not `Sync`: one graph belongs to one thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    corrupt: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; all zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::scalar(0.0))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            corrupt: None,
        }
    }

    /// A graph whose backward rule for `kind` is deliberately wrong (scaled
    /// by 1.5). Exists only as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn with_corrupted_rule(kind: OpKind) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            corrupt: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.inputs().iter().any(|v| nodes[v.0].needs_grad),
        };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes.borrow()[v.0].op.kind()
    }

    /// Smallest distance from any recorded input to a point where its op is
    /// not differentiable (ReLU and abs at 0, clamp bounds, integer sample
    /// coordinates). Only inputs that carry gradient count. `INFINITY` when
    /// there are none.
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let live = |v: &Var| nodes[v.0].needs_grad;
        let min_over = |v: &Var, f: &dyn Fn(f64) -> f64| {
            nodes[v.0].value.data().iter().fold(f64::INFINITY, |m, &x| m.min(f(x)))
        };
        let mut margin = f64::INFINITY;
        for node in nodes.iter() {
            let m = match &node.op {
                Op::Relu(a) | Op::Abs(a) if live(a) => min_over(a, &libm::fabs),
                Op::Clamp(a, lo, hi) if live(a) => {
                    min_over(a, &|x| libm::fabs(x - lo).min(libm::fabs(x - hi)))
                }
                Op::BilinearSample(_, p) if live(p) => {
                    min_over(p, &|x| libm::fabs(x - libm::round(x)))
                }
                _ => f64::INFINITY,
            };
            margin = margin.min(m);
        }
        margin
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(mismatch("transpose", &va, &va));
        }
        let out = va.transpose();
        drop(va);
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, &va, &vb));
        }
        Ok(zip_map(&va, &vb, f))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, a: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vr) = (self.value(a), self.value(row));
        let n = vr.len();
        if va.shape().len() != 2 || va.shape()[1] != n {
            return Err(mismatch(name, &va, &vr));
        }
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vr.data()[i % n]))
            .collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, r| x + r)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, r| x * r)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// `scale · a + shift` for constants.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    /// Natural log; callers clamp away from zero first.
    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, libm::log, Op::Ln(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, libm::fabs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `a^e` for non-negative `a` and a constant exponent.
    pub fn pow(&self, a: Var, e: f64) -> Var {
        self.unary(a, |x| libm::pow(x, e), Op::Pow(a, e))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len().max(1) as f64;
        let s = v.data().iter().sum::<f64>() / n;
        drop(v);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    // ---- row-wise normalisations -----------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(mismatch("softmax_rows", &v, &v));
        }
        let n = v.cols();
        let mut out = v.data().to_vec();
        drop(v);
        if n > 0 {
            for row in out.chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        let shape = self.shape(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(a)))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine parameters.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(mismatch("layer_norm_rows", &v, &v));
        }
        let n = v.cols();
        let mut out = v.data().to_vec();
        drop(v);
        if n > 0 {
            for row in out.chunks_mut(n) {
                let (mean, rstd) = row_stats(row, eps);
                for x in row.iter_mut() {
                    *x = (*x - mean) * rstd;
                }
            }
        }
        let shape = self.shape(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNormRows(a, eps)))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 || start > end || end > v.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let width = end - start;
        let mut out = Vec::with_capacity(v.rows() * width);
        for i in 0..v.rows() {
            out.extend_from_slice(&v.row(i)[start..end]);
        }
        let rows = v.rows();
        drop(v);
        Ok(self.push(Tensor::from_parts(vec![rows, width], out), Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let first = &nodes[parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_cols",
            lhs: Vec::new(),
            rhs: Vec::new(),
        })?
        .0]
            .value;
        if first.shape().len() != 2 {
            return Err(mismatch("concat_cols", first, first));
        }
        let rows = first.rows();
        let mut width = 0;
        for p in parts {
            let t = &nodes[p.0].value;
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(mismatch("concat_cols", first, t));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(nodes[p.0].value.row(i));
            }
        }
        drop(nodes);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// `out[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if indices.iter().any(|&i| i >= v.len()) || shape.iter().product::<usize>() != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = indices.iter().map(|&i| v.data()[i]).collect();
        drop(v);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather(a, indices)))
    }

    // ---- sampling -------------------------------------------------------

    /// Bilinear interpolation of an `h×w×c` map at `p×2` continuous `(x, y)`
    /// pixel coordinates, with zero padding outside the map. Pixel `(i, j)`
    /// sits at coordinate `(x = j, y = i)`.
    pub fn bilinear_sample(&self, map: Var, points: Var) -> Result<Var> {
        let (m, pts) = (self.value(map), self.value(points));
        if m.shape().len() != 3 || pts.shape().len() != 2 || pts.shape()[1] != 2 {
            return Err(mismatch("bilinear_sample", &m, &pts));
        }
        let (h, w, c) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let p = pts.shape()[0];
        let mut out = vec![0.0; p * c];
        for (i, xy) in pts.data().chunks(2).enumerate() {
            let o = &mut out[i * c..(i + 1) * c];
            for (yy, xx, wt) in corners(xy[0], xy[1]) {
                if let Some(base) = pixel_offset(yy, xx, h, w, c) {
                    for (ov, &mv) in o.iter_mut().zip(&m.data()[base..base + c]) {
                        *ov += wt * mv;
                    }
                }
            }
        }
        drop((m, pts));
        Ok(self.push(Tensor::from_parts(vec![p, c], out), Op::BilinearSample(map, points)))
    }

    /// `out[i, :] = Σ_p weights[i, p] · samples[i·P + p, :]`.
    pub fn group_weighted_sum(&self, weights: Var, samples: Var) -> Result<Var> {
        let (wv, sv) = (self.value(weights), self.value(samples));
        if wv.shape().len() != 2 || sv.shape().len() != 2 || wv.len() != sv.rows() {
            return Err(mismatch("group_weighted_sum", &wv, &sv));
        }
        let (m, groups, c) = (wv.rows(), wv.cols(), sv.cols());
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let o = &mut out[i * c..(i + 1) * c];
            for p in 0..groups {
                let wt = wv.data()[i * groups + p];
                for (ov, &s) in o.iter_mut().zip(sv.row(i * groups + p)) {
                    *ov += wt * s;
                }
            }
        }
        drop((wv, sv));
        Ok(self.push(
            Tensor::from_parts(vec![m, c], out),
            Op::GroupWeightedSum(weights, samples),
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contribs = self.local_grads(&nodes, node, &g);
            if self.corrupt == Some(node.op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (v, t) in contribs {
                if !nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: &Var| &nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut out = Vec::new();
                if wants(a) {
                    // dA = G · Bᵀ
                    let bt = vb.transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let at = va.transpose();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(b), |gi, bi| gi * bi)),
                (*b, zip_map(g, val(a), |gi, ai| gi * ai)),
            ],
            Op::AddRow(a, r) => {
                let n = val(r).len();
                let mut dr = vec![0.0; n];
                for (i, &gi) in g.data().iter().enumerate() {
                    dr[i % n] += gi;
                }
                vec![(*a, g.clone()), (*r, Tensor::from_parts(val(r).shape().to_vec(), dr))]
            }
            Op::MulRow(a, r) => {
                let (va, vr) = (val(a), val(r));
                let n = vr.len();
                let mut dr = vec![0.0; n];
                let mut da = Vec::with_capacity(va.len());
                for (i, (&gi, &ai)) in g.data().iter().zip(va.data()).enumerate() {
                    dr[i % n] += gi * ai;
                    da.push(gi * vr.data()[i % n]);
                }
                vec![
                    (*a, Tensor::from_parts(va.shape().to_vec(), da)),
                    (*r, Tensor::from_parts(vr.shape().to_vec(), dr)),
                ]
            }
            Op::Affine(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::Sigmoid(a) => vec![(*a, zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi)))],
            Op::Relu(a) => vec![(*a, zip_map(g, val(a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }))],
            Op::Exp(a) => vec![(*a, zip_map(g, y, |gi, yi| gi * yi))],
            Op::Ln(a) => vec![(*a, zip_map(g, val(a), |gi, xi| gi / xi))],
            Op::Abs(a) => vec![(
                *a,
                zip_map(g, val(a), |gi, xi| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }),
            )],
            Op::Square(a) => vec![(*a, zip_map(g, val(a), |gi, xi| 2.0 * gi * xi))],
            Op::Pow(a, e) => {
                let e = *e;
                vec![(
                    *a,
                    zip_map(g, val(a), |gi, xi| {
                        if xi == 0.0 && e < 1.0 {
                            0.0
                        } else {
                            gi * e * libm::pow(xi, e - 1.0)
                        }
                    }),
                )]
            }
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                zip_map(g, val(a), |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }),
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(a).len().max(1) as f64;
                vec![(*a, Tensor::full(val(a).shape(), g.item() / n))]
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut dx = vec![0.0; y.len()];
                if n > 0 {
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yi * (gi - dot);
                        }
                    }
                }
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(a);
                let n = x.cols();
                let mut dx = vec![0.0; x.len()];
                if n > 0 {
                    let nf = n as f64;
                    for (((dr, xr), yr), gr) in dx
                        .chunks_mut(n)
                        .zip(x.data().chunks(n))
                        .zip(y.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let (_, rstd) = row_stats(xr, *eps);
                        let g_mean = gr.iter().sum::<f64>() / nf;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = rstd * (gi - g_mean - yi * gy_mean);
                        }
                    }
                }
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::Reshape(a) => vec![(*a, Tensor::from_parts(val(a).shape().to_vec(), g.data().to_vec()))],
            Op::SliceCols(a, start) => {
                let x = val(a);
                let (rows, cols) = (x.rows(), x.cols());
                let width = g.cols();
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    dx[i * cols + start..i * cols + start + width].copy_from_slice(g.row(i));
                }
                vec![(*a, Tensor::from_parts(vec![rows, cols], dx))]
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let width = val(p).cols();
                    let mut dp = Vec::with_capacity(rows * width);
                    for i in 0..rows {
                        dp.extend_from_slice(&g.row(i)[offset..offset + width]);
                    }
                    offset += width;
                    out.push((*p, Tensor::from_parts(vec![rows, width], dp)));
                }
                out
            }
            Op::Gather(a, indices) => {
                let x = val(a);
                let mut dx = vec![0.0; x.len()];
                for (&i, &gi) in indices.iter().zip(g.data()) {
                    dx[i] += gi;
                }
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::BilinearSample(map, points) => {
                let (m, pts) = (val(map), val(points));
                let (h, w, c) = (m.shape()[0], m.shape()[1], m.shape()[2]);
                let mut dmap = vec![0.0; m.len()];
                let mut dpts = vec![0.0; pts.len()];
                let at = |yy: i64, xx: i64, ch: usize| {
                    pixel_offset(yy, xx, h, w, c).map_or(0.0, |b| m.data()[b + ch])
                };
                for (i, xy) in pts.data().chunks(2).enumerate() {
                    let gi = g.row(i);
                    if wants(map) {
                        for (yy, xx, wt) in corners(xy[0], xy[1]) {
                            if let Some(base) = pixel_offset(yy, xx, h, w, c) {
                                for (d, &gv) in dmap[base..base + c].iter_mut().zip(gi) {
                                    *d += wt * gv;
                                }
                            }
                        }
                    }
                    if wants(points) {
                        let (x0, y0) = (libm::floor(xy[0]), libm::floor(xy[1]));
                        let (fx, fy) = (xy[0] - x0, xy[1] - y0);
                        let (x0, y0) = (x0 as i64, y0 as i64);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for (ch, &gv) in gi.iter().enumerate() {
                            let m00 = at(y0, x0, ch);
                            let m01 = at(y0, x0 + 1, ch);
                            let m10 = at(y0 + 1, x0, ch);
                            let m11 = at(y0 + 1, x0 + 1, ch);
                            gx += gv * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
                            gy += gv * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
                        }
                        dpts[2 * i] = gx;
                        dpts[2 * i + 1] = gy;
                    }
                }
                vec![
                    (*map, Tensor::from_parts(m.shape().to_vec(), dmap)),
                    (*points, Tensor::from_parts(pts.shape().to_vec(), dpts)),
                ]
            }
            Op::GroupWeightedSum(weights, samples) => {
                let (wv, sv) = (val(weights), val(samples));
                let (m, groups, c) = (wv.rows(), wv.cols(), sv.cols());
                let mut dw = vec![0.0; wv.len()];
                let mut ds = vec![0.0; sv.len()];
                for i in 0..m {
                    let gi = g.row(i);
                    for p in 0..groups {
                        let r = i * groups + p;
                        let srow = sv.row(r);
                        dw[r] = gi.iter().zip(srow).map(|(a, b)| a * b).sum();
                        let wt = wv.data()[r];
                        for (d, &gv) in ds[r * c..(r + 1) * c].iter_mut().zip(gi) {
                            *d = wt * gv;
                        }
                    }
                }
                vec![
                    (*weights, Tensor::from_parts(wv.shape().to_vec(), dw)),
                    (*samples, Tensor::from_parts(sv.shape().to_vec(), ds)),
                ]
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

/// The four interpolation corners `(row, col, weight)` around `(x, y)`.
fn corners(x: f64, y: f64) -> [(i64, i64, f64); 4] {
    let (x0, y0) = (libm::floor(x), libm::floor(y));
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x0 + 1, fx * (1.0 - fy)),
        (y0 + 1, x0, (1.0 - fx) * fy),
        (y0 + 1, x0 + 1, fx * fy),
    ]
}

fn pixel_offset(yy: i64, xx: i64, h: usize, w: usize, c: usize) -> Option<usize> {
    (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| (yy as usize * w + xx as usize) * c)
}
