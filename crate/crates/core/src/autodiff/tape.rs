//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and appends a node; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints additively, so a value
//! feeding several consumers receives the sum of their contributions.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op implemented outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// output adjoint, and returns one adjoint per input (`None` for inputs it
/// does not differentiate).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaskedFill(Var, Vec<bool>),
    Select(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Clamp(..) => "clamp",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MaskedFill(..) => "masked_fill",
            Op::Select(..) => "select",
            Op::GatherRows(..) => "gather_rows",
            Op::Custom(_, op) => op.name(),
        };
        f.write_str(name)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads
            .get(var.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Gradient per named parameter registered through [`Tape::param`].
    pub fn params(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, var)| (name.clone(), self.wrt(*var)))
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn emit(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, op, rg))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter name.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf for a named parameter; repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.param_lookup.get(name) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.push((name.to_owned(), v));
        self.param_lookup.insert(name.to_owned(), v);
        v
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.emit("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        self.emit("matmul_nt", Tensor::raw(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.emit("transpose", Tensor::raw(vec![c, r], out), Op::Transpose(a), &[a])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::raw(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.emit("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.emit("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.emit("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if self.value(row).numel() != m {
            return Err(Error::shape(
                "add_row",
                format!("{n}x{m} + {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        self.emit("add_row", Tensor::raw(vec![n, m], out), Op::AddRow(a, row), &[a, row])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(a), c.shape()),
            ));
        }
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::raw(c.shape().to_vec(), data);
        self.emit("mul_const", out, Op::MulConst(a, c.data().to_vec()), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.emit("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.emit("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.emit("concat", Tensor::raw(shape, out), Op::Concat(inputs.to_vec(), axis), inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.emit(
            "slice",
            Tensor::raw(out_shape, out),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.emit("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.emit("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.emit("exp", out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.emit("ln", out, Op::Ln(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(min, max));
        self.emit("clamp", out, Op::Clamp(a, min, max), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sin);
        self.emit("sin", out, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::cos);
        self.emit("cos", out, Op::Cos(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.emit("sqrt", out, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.emit("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.numel().max(1) as f64;
        let out = Tensor::scalar(t.sum() / n);
        self.emit("mean", out, Op::Mean(a), &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let row = &src[(o * d + k) * inner..(o * d + k + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.emit("sum_axis", Tensor::raw(out_shape, out), Op::SumAxis(a, axis), &[a])
    }

    fn axis_checked(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} for {shape:?}")));
        }
        Ok(axis_split(shape, axis))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, d, inner) = self.axis_checked("softmax", a, axis)?;
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * d + k) * inner + i;
                let max = (0..d).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..d {
                    let e = (out[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..d {
                    out[idx(k)] /= z;
                }
            }
        }
        let t = Tensor::raw(self.shape(a).to_vec(), out);
        self.emit("softmax", t, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, d, inner) = self.axis_checked("log_softmax", a, axis)?;
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * d + k) * inner + i;
                let max = (0..d).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..d).map(|k| (out[idx(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..d {
                    out[idx(k)] -= lse;
                }
            }
        }
        let t = Tensor::raw(self.shape(a).to_vec(), out);
        self.emit("log_softmax", t, Op::LogSoftmax(a, axis), &[a])
    }

    /// Replaces entries where `mask` is true with `value`; those entries
    /// carry no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} for {:?}", mask.len(), self.shape(a)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::raw(self.shape(a).to_vec(), data);
        self.emit("masked_fill", t, Op::MaskedFill(a, mask.to_vec()), &[a])
    }

    /// Gathers flat elements into a rank-1 tensor.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("select", format!("index {bad} of {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let t = Tensor::raw(vec![indices.len()], data);
        self.emit("select", t, Op::Select(a, indices.to_vec()), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        let t = Tensor::raw(vec![rows.len(), m], data);
        self.emit("gather_rows", t, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Records an externally computed op. `output` must be the forward
    /// result of `op` applied to `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.emit(name, output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or(Error::UnknownVar(loss.0))?;
        if !node.value.is_scalar() {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::raw(val(v).shape().to_vec(), data);
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*b).data(), true, &mut da, false);
                    acc(*a, like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, gd, false, &mut db, false);
                    acc(*b, like(*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.0;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*b).data(), false, &mut da, false);
                    acc(*a, like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, val(*a).data(), false, &mut db, false);
                    acc(*b, like(*b, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[j * r + i];
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, like(*a, gd.iter().zip(tb).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, gd.iter().zip(ta).map(|(g, x)| g * x).collect()));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let m = val(*row).numel();
                let mut dr = vec![0.0; m];
                for chunk in gd.chunks(m) {
                    for (d, x) in dr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                acc(*row, like(*row, dr));
            }
            Op::MulConst(a, c) => {
                acc(*a, like(*a, gd.iter().zip(c).map(|(g, c)| g * c).collect()));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Concat(inputs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = val(v).shape()[*axis];
                    let mut dv = Vec::with_capacity(val(v).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dv.extend_from_slice(&gd[base..base + d * inner]);
                    }
                    acc(v, like(v, dv));
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape();
                let (outer, d, inner) = axis_split(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut da = vec![0.0; val(*input).numel()];
                for o in 0..outer {
                    let dst = o * d * inner + start * inner;
                    da[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*input, like(*input, da));
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Softmax(a, axis) => {
                let (outer, d, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * d + k) * inner + i;
                        let dot: f64 = (0..d).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..d {
                            da[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, d, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * d + k) * inner + i;
                        let gs: f64 = (0..d).map(|k| gd[idx(k)]).sum();
                        for k in 0..d {
                            da[idx(k)] = gd[idx(k)] - y[idx(k)].exp() * gs;
                        }
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, like(*a, gd.iter().zip(y).map(|(g, y)| g * y).collect()));
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                acc(*a, like(*a, da));
            }
            Op::Sin(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(g, x)| g * x.cos()).collect()));
            }
            Op::Cos(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(g, x)| -g * x.sin()).collect()));
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, like(*a, gd.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect()));
            }
            Op::Sum(a) => {
                let n = val(*a).numel();
                acc(*a, like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc(*a, like(*a, vec![gd[0] / n.max(1) as f64; n]));
            }
            Op::SumAxis(a, axis) => {
                let (outer, d, inner) = axis_split(val(*a).shape(), *axis);
                let mut da = vec![0.0; outer * d * inner];
                for o in 0..outer {
                    for k in 0..d {
                        let dst = (o * d + k) * inner;
                        da[dst..dst + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::MaskedFill(a, mask) => {
                let da = gd
                    .iter()
                    .zip(mask)
                    .map(|(g, &m)| if m { 0.0 } else { *g })
                    .collect();
                acc(*a, like(*a, da));
            }
            Op::Select(a, indices) => {
                let mut da = vec![0.0; val(*a).numel()];
                for (g, &i) in gd.iter().zip(indices) {
                    da[i] += g;
                }
                acc(*a, like(*a, da));
            }
            Op::GatherRows(a, rows) => {
                let (_, m) = val(*a).dims2()?;
                let mut da = vec![0.0; val(*a).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        da[r * m + j] += gd[k * m + j];
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                for (&v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        check_finite(op.name(), &d)?;
                        acc(v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{:?}", self.op, self.value.shape())
    }
}
