//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated, keeping the
//! output value of each node. Node ids are handed out in evaluation order,
//! so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Most row-wise ops interpret their operand as a matrix: rank-2 tensors
//! are `[rows, cols]`, rank-1 tensors are a single row and scalars are
//! `[1, 1]`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Lower bound applied to the arguments of `log`, `sqrt` and row norms.
pub const CLAMP_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar output; node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("invalid tensor: shape {shape:?} does not match {len} data entries")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::InvalidTensor { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows, cols]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AutodiffError::InvalidTensor { shape: vec![rows.len(), cols], len: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { shape: vec![rows.len(), cols], data })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Matrix view `(rows, cols)`; `None` above rank 2.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Some((1, 1)),
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(0, |d| d.1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    MaxConst(NodeId, f64),
    MinConst(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    RowL2Norm(NodeId),
    Concat(Vec<NodeId>),
    AddBias(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    DivCol(NodeId, NodeId),
    SelectRows(NodeId, Vec<usize>),
    PairwiseSqDist(NodeId),
    LogMeanExp(NodeId, Option<Vec<bool>>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Minimum(..) => "minimum",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::MaxConst(..) => "max_const",
            Op::MinConst(..) => "min_const",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::RowL2Norm(..) => "row_l2_norm",
            Op::Concat(..) => "concat",
            Op::AddBias(..) => "add_bias",
            Op::MulCol(..) => "mul_col",
            Op::DivCol(..) => "div_col",
            Op::SelectRows(..) => "select_rows",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::LogMeanExp(..) => "log_mean_exp",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by parameter node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient of `id`; panics if `id` was not a parameter of the graph.
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.grads[&id]
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

/// Append-only operation tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    saturated: bool,
    kink_margin: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), saturated: false, kink_margin: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether any `log`, `sqrt` or norm argument hit [`CLAMP_FLOOR`].
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Smallest distance of any piecewise op input from its breakpoint.
    /// Finite-difference checks are only meaningful when this is not tiny.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Registers a differentiable root.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.push_leaf(t, true);
        self.params.push(id);
        id
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value: t, requires_grad });
        id
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn mismatch<T>(&self, detail: String) -> Result<T> {
        Err(AutodiffError::ShapeMismatch { node: self.next_id(), detail })
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn dims(&self, id: NodeId) -> Result<(usize, usize)> {
        let t = self.check(id)?;
        match t.dims2() {
            Some(d) => Ok(d),
            None => self.mismatch(format!("node {} has rank {} > 2", id.0, t.shape.len())),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let node = self.next_id();
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { node, op: op.name() });
        }
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(node))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Minimum(a, b)
            | Op::AddBias(a, b)
            | Op::MulCol(a, b)
            | Op::DivCol(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::MaxConst(a, _)
            | Op::MinConst(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::RowL2Norm(a)
            | Op::SelectRows(a, _)
            | Op::PairwiseSqDist(a)
            | Op::LogMeanExp(a, _) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape != tb.shape {
            return self.mismatch(format!("operands {:?} vs {:?}", ta.shape, tb.shape));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let t = self.check(a)?;
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() };
        self.push(op, value)
    }

    fn zip_binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return self.mismatch(format!("matmul [{m}, {k}] x [{k2}, {n}]"));
        }
        let data = matmul_kernel(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        self.push(Op::MatMul(a, b), Tensor { shape: vec![m, n], data })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        let data = transpose_kernel(&self.nodes[a.0].value.data, r, c);
        self.push(Op::Transpose(a), Tensor { shape: vec![c, r], data })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let margin = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| (x - y).abs())
            .fold(f64::INFINITY, f64::min);
        let id = self.zip_binary(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })?;
        self.kink_margin = self.kink_margin.min(margin);
        Ok(id)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map_unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.check(a)?.data.iter().any(|&x| x < CLAMP_FLOOR) {
            self.saturated = true;
        }
        self.map_unary(a, Op::Log(a), |x| x.max(CLAMP_FLOOR).ln())
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.check(a)?.data.iter().any(|&x| x < CLAMP_FLOOR) {
            self.saturated = true;
        }
        self.map_unary(a, Op::Sqrt(a), |x| x.max(CLAMP_FLOOR).sqrt())
    }

    /// `max(x, c)`; with `c = 0` this is ReLU.
    pub fn max_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.track_kinks(a, c)?;
        self.map_unary(a, Op::MaxConst(a, c), |x| x.max(c))
    }

    pub fn min_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.track_kinks(a, c)?;
        self.map_unary(a, Op::MinConst(a, c), |x| x.min(c))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.max_const(a, 0.0)
    }

    /// `min(max(x, lo), hi)`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let lower = self.max_const(a, lo)?;
        self.min_const(lower, hi)
    }

    fn track_kinks(&mut self, a: NodeId, c: f64) -> Result<()> {
        let margin = self.check(a)?.data.iter().map(|x| (x - c).abs()).fold(f64::INFINITY, f64::min);
        self.kink_margin = self.kink_margin.min(margin);
        Ok(())
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.check(a)?;
        if t.data.is_empty() {
            return self.mismatch("mean of empty tensor".into());
        }
        let m = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        let src = &self.nodes[a.0].value.data;
        let data = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Op::RowSum(a), Tensor { shape: vec![r, 1], data })
    }

    /// Row Euclidean norms, `[r, c] -> [r, 1]`, floored at [`CLAMP_FLOOR`].
    pub fn row_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        let src = &self.nodes[a.0].value.data;
        let norms: Vec<f64> =
            (0..r).map(|i| src[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if norms.iter().any(|&n| n < CLAMP_FLOOR) {
            self.saturated = true;
        }
        let data = norms.into_iter().map(|n| n.max(CLAMP_FLOOR)).collect();
        self.push(Op::RowL2Norm(a), Tensor { shape: vec![r, 1], data })
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return self.mismatch("concat of zero operands".into());
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims(p)?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            return self.mismatch(format!("concat row counts {:?}", dims));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.nodes[p.0].value.data[i * c..(i + 1) * c]);
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor { shape: vec![rows, total], data })
    }

    /// Adds a `[1, c]` (or `[c]`) bias to every row of `[r, c]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        let (br, bc) = self.dims(bias)?;
        if br != 1 || bc != c {
            return self.mismatch(format!("bias [{br}, {bc}] for [{r}, {c}]"));
        }
        let b = &self.nodes[bias.0].value.data;
        let src = &self.nodes[a.0].value.data;
        let data = src.iter().enumerate().map(|(i, v)| v + b[i % c]).collect();
        self.push(Op::AddBias(a, bias), Tensor { shape: vec![r, c], data })
    }

    /// Multiplies row `i` of `[r, c]` by entry `i` of a `[r, 1]` column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, c) = self.col_operands(a, col)?;
        let s = &self.nodes[col.0].value.data;
        let src = &self.nodes[a.0].value.data;
        let data = src.iter().enumerate().map(|(i, v)| v * s[i / c.max(1)]).collect();
        self.push(Op::MulCol(a, col), Tensor { shape: vec![r, c], data })
    }

    /// Divides row `i` of `[r, c]` by entry `i` of a `[r, 1]` column.
    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, c) = self.col_operands(a, col)?;
        let s = &self.nodes[col.0].value.data;
        let src = &self.nodes[a.0].value.data;
        let data = src.iter().enumerate().map(|(i, v)| v / s[i / c.max(1)]).collect();
        self.push(Op::DivCol(a, col), Tensor { shape: vec![r, c], data })
    }

    fn col_operands(&self, a: NodeId, col: NodeId) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a)?;
        let (cr, cc) = self.dims(col)?;
        if cr != r || cc != 1 {
            return self.mismatch(format!("column [{cr}, {cc}] for [{r}, {c}]"));
        }
        Ok((r, c))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return self.mismatch(format!("row index {bad} out of {r}"));
        }
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Op::SelectRows(a, idx.to_vec()), Tensor { shape: vec![idx.len(), c], data })
    }

    /// `D[i][j] = |h_i - h_j|^2` for the rows of `[b, d]`; exact zero diagonal.
    pub fn pairwise_sq_dist(&mut self, a: NodeId) -> Result<NodeId> {
        let (b, d) = self.dims(a)?;
        let h = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let s: f64 = (0..d).map(|t| (h[i * d + t] - h[j * d + t]).powi(2)).sum();
                data[i * b + j] = s;
                data[j * b + i] = s;
            }
        }
        self.push(Op::PairwiseSqDist(a), Tensor { shape: vec![b, b], data })
    }

    /// `log(mean(exp(x)))` over all entries, or over entries where `mask` is
    /// true. Evaluated with max-shifting so large negative arguments do not
    /// underflow.
    pub fn log_mean_exp(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let t = self.check(a)?;
        if let Some(m) = &mask {
            if m.len() != t.data.len() {
                return self.mismatch(format!("mask of {} for {} entries", m.len(), t.data.len()));
            }
        }
        let selected: Vec<f64> = match &mask {
            Some(m) => t.data.iter().zip(m).filter(|(_, &k)| k).map(|(&v, _)| v).collect(),
            None => t.data.clone(),
        };
        if selected.is_empty() {
            return self.mismatch("log_mean_exp over zero entries".into());
        }
        let value = log_mean_exp_values(&selected);
        self.push(Op::LogMeanExp(a, mask), Tensor::scalar(value))
    }

    /// Reverse sweep from a scalar `output`. Every registered parameter gets
    /// a gradient; parameters the output does not depend on get zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.check(output)?;
        if out.data.len() != 1 {
            return Err(AutodiffError::NonScalarOutput { node: output.0, shape: out.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        let mut result = Gradients::default();
        for &p in &self.params {
            let shape = self.nodes[p.0].value.shape.clone();
            let data = grads.get(p.0).and_then(|g| g.clone()).unwrap_or_else(|| vec![0.0; self.nodes[p.0].value.len()]);
            result.grads.insert(p, Tensor { shape, data });
        }
        Ok(result)
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |n: NodeId| &self.nodes[n.0].value;
        let wants = |n: NodeId| self.nodes[n.0].requires_grad;
        let mut acc = |n: NodeId, contrib: Vec<f64>| {
            if !self.nodes[n.0].requires_grad {
                return;
            }
            match &mut grads[n.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).cols();
                if wants(*a) {
                    acc(*a, matmul_bt_kernel(g, &val(*b).data, m, n, k));
                }
                if wants(*b) {
                    acc(*b, matmul_at_kernel(&val(*a).data, g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                acc(*a, transpose_kernel(g, c, r));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                if wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                let pick_a: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                acc(*a, g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect());
                acc(*b, g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Offset(a) => acc(*a, g.to_vec()),
            Op::Exp(a) => acc(*a, g.iter().zip(&node.value.data).map(|(g, y)| g * y).collect()),
            Op::Log(a) => acc(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(g, &x)| if x < CLAMP_FLOOR { 0.0 } else { g / x })
                    .collect(),
            ),
            Op::Square(a) => acc(*a, g.iter().zip(&val(*a).data).map(|(g, x)| 2.0 * g * x).collect()),
            Op::Sqrt(a) => acc(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .zip(&node.value.data)
                    .map(|((g, &x), y)| if x < CLAMP_FLOOR { 0.0 } else { g * 0.5 / y })
                    .collect(),
            ),
            Op::MaxConst(a, c) => {
                acc(*a, g.iter().zip(&val(*a).data).map(|(g, x)| if x > c { *g } else { 0.0 }).collect())
            }
            Op::MinConst(a, c) => {
                acc(*a, g.iter().zip(&val(*a).data).map(|(g, x)| if x < c { *g } else { 0.0 }).collect())
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                acc(*a, (0..r * c).map(|i| g[i / c]).collect());
            }
            Op::RowL2Norm(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                let x = &val(*a).data;
                let norms = &node.value.data;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let raw: f64 = x[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw < CLAMP_FLOOR {
                        continue;
                    }
                    for j in 0..c {
                        out[i * c + j] = g[i] * x[i * c + j] / norms[i];
                    }
                }
                acc(*a, out);
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let mut out = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            out.extend_from_slice(&g[i * total + start..i * total + start + c]);
                        }
                        acc(p, out);
                    }
                    start += c;
                }
            }
            Op::AddBias(a, bias) => {
                let c = val(*a).cols();
                acc(*a, g.to_vec());
                if wants(*bias) {
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    acc(*bias, gb);
                }
            }
            Op::MulCol(a, col) => {
                let (r, c) = val(*a).dims2().unwrap();
                let (x, s) = (&val(*a).data, &val(*col).data);
                if wants(*a) {
                    acc(*a, g.iter().enumerate().map(|(i, g)| g * s[i / c]).collect());
                }
                if wants(*col) {
                    let gs = (0..r).map(|i| (0..c).map(|j| g[i * c + j] * x[i * c + j]).sum()).collect();
                    acc(*col, gs);
                }
            }
            Op::DivCol(a, col) => {
                let (r, c) = val(*a).dims2().unwrap();
                let (x, s) = (&val(*a).data, &val(*col).data);
                if wants(*a) {
                    acc(*a, g.iter().enumerate().map(|(i, g)| g / s[i / c]).collect());
                }
                if wants(*col) {
                    let gs = (0..r)
                        .map(|i| -(0..c).map(|j| g[i * c + j] * x[i * c + j]).sum::<f64>() / (s[i] * s[i]))
                        .collect();
                    acc(*col, gs);
                }
            }
            Op::SelectRows(a, idx) => {
                let c = val(*a).cols();
                let mut out = vec![0.0; val(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g[k * c + j];
                    }
                }
                acc(*a, out);
            }
            Op::PairwiseSqDist(a) => {
                let (b, d) = val(*a).dims2().unwrap();
                let h = &val(*a).data;
                let mut out = vec![0.0; b * d];
                for i in 0..b {
                    for j in 0..b {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * b + j] + g[j * b + i]);
                        for t in 0..d {
                            out[i * d + t] += w * (h[i * d + t] - h[j * d + t]);
                        }
                    }
                }
                acc(*a, out);
            }
            Op::LogMeanExp(a, mask) => {
                let x = &val(*a).data;
                let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let max = x.iter().enumerate().filter(|(i, _)| on(*i)).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> =
                    x.iter().enumerate().map(|(i, v)| if on(i) { (v - max).exp() } else { 0.0 }).collect();
                let total: f64 = weights.iter().sum();
                acc(*a, weights.iter().map(|w| g[0] * w / total).collect());
            }
        }
    }
}

/// Stable `log(mean(exp(values)))`.
pub fn log_mean_exp_values(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (total / values.len() as f64).ln()
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `G · Bᵀ` for `G: [m, n]`, `B: [k, n]`.
fn matmul_bt_kernel(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `Aᵀ · G` for `A: [m, k]`, `G: [m, n]`.
fn matmul_at_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Evaluates a graph built by `build` over named inputs and returns its named
/// outputs. Every input is registered as a parameter.
pub fn eval<F>(inputs: &[(&str, Tensor)], build: F) -> Result<BTreeMap<String, Tensor>>
where
    F: FnOnce(&mut Graph, &BTreeMap<String, NodeId>) -> Result<Vec<(String, NodeId)>>,
{
    let mut g = Graph::new();
    let ids: BTreeMap<String, NodeId> =
        inputs.iter().map(|(name, t)| (name.to_string(), g.param(t.clone()))).collect();
    let outputs = build(&mut g, &ids)?;
    Ok(outputs.into_iter().map(|(name, id)| (name, g.value(id).clone())).collect())
}

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over all coordinates.
    pub max_rel_error: f64,
    /// [`Graph::kink_margin`] of the graph at the unperturbed point.
    pub kink_margin: f64,
}

/// Central-difference gradient check of a scalar function of several inputs.
///
/// `f` receives the graph and one node per entry of `points`; it must return a
/// scalar node.
pub fn finite_diff_report<F>(f: F, points: &[Tensor], step: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let kink_margin = g.kink_margin();

    let evaluate = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.scalar_value(out))
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut max_rel_error: f64 = 0.0;
    for (slot, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).data.clone();
        for (c, an) in analytic.iter().enumerate() {
            let orig = work[slot].data[c];
            work[slot].data[c] = orig + step;
            let plus = evaluate(&work)?;
            work[slot].data[c] = orig - step;
            let minus = evaluate(&work)?;
            work[slot].data[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (an - numeric).abs() / an.abs().max(1.0);
            max_rel_error = max_rel_error.max(err);
        }
    }
    Ok(FiniteDiffReport { max_rel_error, kink_margin })
}

/// Single-input convenience wrapper returning the maximum relative error.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    finite_diff_report(|g, ids| f(g, ids[0]), std::slice::from_ref(point), step).map(|r| r.max_rel_error)
}
