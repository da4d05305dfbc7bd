//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its forward value and the handles of its inputs; nodes are only
//! ever appended after their inputs, so the node index order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::fmt;

use crate::error::{mismatch, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Escape hatch for fused ops with a hand-written backward rule.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input is treated as a
    /// constant by this op).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor)
        -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    MaxRows(Var, Vec<usize>),
    MaxCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    LayerNormRows(Var, f64),
    MaskedFill(Var, Vec<bool>),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded ops, borrowing the parameter values.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn logsumexp_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.push(m + s.ln());
    }
    Tensor::new(vec![r, 1], out).expect("shape")
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects gradient but is not a named parameter. Its
    /// gradient is available via [`Graph::backward_leaves`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a[r,c] + row[1,c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let mut v = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in v.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let v = v.reshape(vec![r, c])?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    /// `a[r,c] * row[1,c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(mismatch("mul_row", self.shape(a), self.shape(row)));
        }
        let mut v = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in v.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *x *= b;
            }
        }
        let v = v.reshape(vec![r, c])?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::MulRow(a, row), ng))
    }

    /// `a[r,c] * col[r,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(mismatch("mul_col", self.shape(a), self.shape(col)));
        }
        let mut v = self.value(a).clone().reshape(vec![r, c])?;
        let cv = self.value(col).data().to_vec();
        for i in 0..r {
            for x in &mut v.data_mut()[i * c..(i + 1) * c] {
                *x *= cv[i];
            }
        }
        let ng = self.ng(&[a, col]);
        Ok(self.push(v, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(v, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; defined for strictly positive inputs only.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::InvalidArgument {
                op: "log",
                message: format!("non-positive input {x}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => {
                let v = softmax_rows(self.value(a));
                let ng = self.ng(&[a]);
                Ok(self.push(v, Op::SoftmaxRows(a), ng))
            }
            0 => {
                let t = self.transpose(a);
                let s = self.softmax(t, 1)?;
                Ok(self.transpose(s))
            }
            _ => Err(Error::InvalidArgument {
                op: "softmax",
                message: format!("axis {axis} out of range for rank-2 tensor"),
            }),
        }
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let lse = logsumexp_rows(self.value(a));
        let (r, c) = self.dims(a);
        let mut v = self.value(a).clone().reshape(vec![r, c]).expect("dims");
        for i in 0..r {
            let m = lse.data()[i];
            for x in &mut v.data_mut()[i * c..(i + 1) * c] {
                *x -= m;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise `log(sum(exp(x)))`: `[r,c] -> [r,1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = logsumexp_rows(self.value(a));
        let ng = self.ng(&[a]);
        self.push(v, Op::LogSumExpRows(a), ng)
    }

    /// Sum over `axis`: 0 gives `[1,c]`, 1 gives `[r,1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a).data();
        let ng = self.ng(&[a]);
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
                Ok(self.push(Tensor::new(vec![1, c], out)?, Op::SumCols(a), ng))
            }
            1 => {
                let out = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
                Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::SumRows(a), ng))
            }
            _ => Err(Error::InvalidArgument {
                op: "sum_axis",
                message: format!("axis {axis}"),
            }),
        }
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let n = if axis == 0 { r } else { c };
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Max over `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a).data();
        let ng = self.ng(&[a]);
        match axis {
            0 => {
                let mut idx = vec![0usize; c];
                let mut out = x[..c].to_vec();
                for i in 1..r {
                    for j in 0..c {
                        if x[i * c + j] > out[j] {
                            out[j] = x[i * c + j];
                            idx[j] = i;
                        }
                    }
                }
                Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MaxCols(a, idx), ng))
            }
            1 => {
                let mut idx = Vec::with_capacity(r);
                let mut out = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    idx.push(best);
                    out.push(row[best]);
                }
                Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::MaxRows(a, idx), ng))
            }
            _ => Err(Error::InvalidArgument {
                op: "max_axis",
                message: format!("axis {axis}"),
            }),
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|p| self.dims(*p).0).ok_or_else(|| Error::InvalidArgument {
            op: "concat_cols",
            message: "no inputs".into(),
        })?;
        for p in parts {
            if self.dims(*p).0 != r {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.dims(*p).1).ok_or_else(|| Error::InvalidArgument {
            op: "concat_rows",
            message: "no inputs".into(),
        })?;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.dims(*p);
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(*p)));
            }
            rows += r;
            out.extend_from_slice(self.value(*p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                message: format!("range {start}..{end} out of bounds for {c} columns"),
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![r, end - start], out)?, Op::SliceCols(a, start, end), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > r {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                message: format!("range {start}..{end} out of bounds for {r} rows"),
            });
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![end - start, c], out)?, Op::SliceRows(a, start, end), ng))
    }

    /// Row gather; doubles as embedding lookup. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::InvalidArgument {
                    op: "gather_rows",
                    message: format!("row {i} out of bounds for {r} rows"),
                });
            }
            out.extend_from_slice(x.row_slice(i));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![idx.len(), c], out)?, Op::GatherRows(a, idx.to_vec()), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Row-wise standardisation `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![r, c], out).expect("dims"), Op::LayerNormRows(a, eps), ng)
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get
    /// zero gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(mismatch("masked_fill", self.shape(a), &[mask.len()]));
        }
        let mut v = self.value(a).clone();
        for (x, &m) in v.data_mut().iter_mut().zip(mask) {
            if m {
                *x = fill;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MaskedFill(a, mask.to_vec()), ng))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let ng = self.ng(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), ng)
    }

    /// `x W + b` for `x [r, in]`, `W [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.param(w)?;
        let bv = self.param(b)?;
        let y = self.matmul(x, wv)?;
        self.add_row(y, bv)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every named
    /// parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        Ok(self.backward_full(loss)?.0)
    }

    /// Like [`Graph::backward`] but also returns gradients for the requested
    /// non-parameter leaves.
    pub fn backward_leaves(&self, loss: Var, leaves: &[Var]) -> Result<(Gradients, Vec<Option<Tensor>>)> {
        let (g, mut all) = self.backward_full(loss)?;
        let picked = leaves.iter().map(|v| all[v.0].take()).collect();
        Ok((g, picked))
    }

    fn backward_full(&self, loss: Var) -> Result<(Gradients, Vec<Option<Tensor>>)> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                message: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out)?;
            if matches!(node.op, Op::Leaf) {
                kept[i] = Some(g);
            }
        }
        Ok((out, kept))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => out.accumulate(name, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul_t(bv)?.reshape(av.shape().to_vec())?;
                    self.acc(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = av.t_matmul(g)?.reshape(bv.shape().to_vec())?;
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone().reshape(val(a).shape().to_vec())?);
                self.acc(grads, *b, g.clone().reshape(val(b).shape().to_vec())?);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone().reshape(val(a).shape().to_vec())?);
                self.acc(grads, *b, g.map(|x| -x).reshape(val(b).shape().to_vec())?);
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(b), |x, y| x * y).reshape(val(a).shape().to_vec())?;
                let gb = g.zip_map(val(a), |x, y| x * y).reshape(val(b).shape().to_vec())?;
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                let (r, c) = g.dims2();
                self.acc(grads, *a, g.clone().reshape(val(a).shape().to_vec())?);
                let mut gr = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in gr.iter_mut().zip(g.row_slice(i)) {
                        *o += v;
                    }
                }
                self.acc(grads, *row, Tensor::new(val(row).shape().to_vec(), gr)?);
            }
            Op::MulRow(a, row) => {
                let (r, c) = g.dims2();
                let rv = val(row).data();
                let av = val(a).data();
                let mut ga = g.clone();
                let mut gr = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        ga.data_mut()[i * c + j] = gij * rv[j];
                        gr[j] += gij * av[i * c + j];
                    }
                }
                self.acc(grads, *a, ga.reshape(val(a).shape().to_vec())?);
                self.acc(grads, *row, Tensor::new(val(row).shape().to_vec(), gr)?);
            }
            Op::MulCol(a, col) => {
                let (r, c) = g.dims2();
                let cv = val(col).data();
                let av = val(a).data();
                let mut ga = g.clone();
                let mut gc = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        ga.data_mut()[i * c + j] = gij * cv[i];
                        gc[i] += gij * av[i * c + j];
                    }
                }
                self.acc(grads, *a, ga.reshape(val(a).shape().to_vec())?);
                self.acc(grads, *col, Tensor::new(val(col).shape().to_vec(), gc)?);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Relu(a) => {
                self.acc(grads, *a, g.zip_map(val(a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }))
            }
            Op::Gelu(a) => self.acc(grads, *a, g.zip_map(val(a), |gi, xi| gi * gelu_grad(xi))),
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
            Op::Log(a) => self.acc(grads, *a, g.zip_map(val(a), |gi, xi| gi / xi)),
            Op::SoftmaxRows(a) => {
                let (r, c) = y.dims2();
                let mut ga = g.clone();
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = y.dims2();
                let mut ga = g.clone();
                for i in 0..r {
                    let gs: f64 = g.row_slice(i).iter().sum();
                    for j in 0..c {
                        let sm = y.data()[i * c + j].exp();
                        ga.data_mut()[i * c + j] = g.data()[i * c + j] - sm * gs;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let x = val(a);
                let (r, c) = x.dims2();
                let mut ga = x.clone();
                for i in 0..r {
                    let l = y.data()[i];
                    for j in 0..c {
                        ga.data_mut()[i * c + j] = g.data()[i] * (x.data()[i * c + j] - l).exp();
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let x = val(a);
                let (r, c) = x.dims2();
                let mut ga = x.clone();
                for i in 0..r {
                    for j in 0..c {
                        ga.data_mut()[i * c + j] = g.data()[i];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let x = val(a);
                let (r, c) = x.dims2();
                let mut ga = x.clone();
                for i in 0..r {
                    ga.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                }
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let gi = g.item();
                self.acc(grads, *a, val(a).map(|_| gi));
            }
            Op::MaxRows(a, idx) => {
                let x = val(a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                for (i, &j) in idx.iter().enumerate() {
                    ga.data_mut()[i * c + j] = g.data()[i];
                }
                self.acc(grads, *a, ga);
            }
            Op::MaxCols(a, idx) => {
                let x = val(a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                for (j, &i) in idx.iter().enumerate() {
                    ga.data_mut()[i * c + j] = g.data()[j];
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2();
                let mut off = 0;
                for p in parts {
                    let pv = val(p);
                    let pc = pv.cols();
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + pc]);
                        }
                        self.acc(grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    if self.nodes[p.0].needs_grad {
                        let d = g.data()[off..off + n].to_vec();
                        self.acc(grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, s, e) => {
                let x = val(a);
                let (r, c) = x.dims2();
                let w = e - s;
                let mut ga = Tensor::zeros(x.shape());
                for i in 0..r {
                    ga.data_mut()[i * c + s..i * c + e].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceRows(a, s, e) => {
                let x = val(a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                ga.data_mut()[s * c..e * c].copy_from_slice(g.data());
                self.acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let x = val(a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Transpose(a) => {
                let ga = g.transpose().reshape(val(a).shape().to_vec())?;
                self.acc(grads, *a, ga);
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(a);
                let (r, c) = x.dims2();
                let mut ga = x.clone();
                for i in 0..r {
                    let row = x.row_slice(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga.data_mut()[i * c + j] = inv * (gr[j] - gm - yr[j] * gym);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::MaskedFill(a, mask) => {
                let mut ga = g.clone();
                for (x, &m) in ga.data_mut().iter_mut().zip(mask) {
                    if m {
                        *x = 0.0;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                let gs = op.backward(&ins, y, g)?;
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.acc(grads, *v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}
