//! Dense `f64` tensors and a dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values enter it either as
//! constants or as leaves that require gradients (typically parameters bound
//! from a [`ParamSet`]). Every primitive applied through [`Var`] appends a node
//! holding its output value; [`Tape::gradients`] then replays the nodes in
//! reverse and returns the adjoint of every node that requires a gradient.
//!
//! Tapes use interior mutability and are confined to one thread. Data-parallel
//! training builds one tape per sequence and sums the resulting parameter
//! gradients afterwards.

use std::cell::RefCell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Single-row matrix of shape `(1, len)`.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )))
        }
    }
}

/// Zeroes the gradient buffer of every tensor.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Tensor>) {
    for p in params {
        p.zero_grad();
    }
}

/// Primitive operations understood by the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise sum. The right operand may be a `(1, n)` row broadcast over rows.
    Add,
    /// Elementwise difference, broadcasting like [`Primitive::Add`].
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    MatMul,
    Tanh,
    Sigmoid,
    Relu,
    /// Row-wise softmax of a matrix.
    Softmax,
    /// Row-wise log-softmax of a matrix.
    LogSoftmax,
    Log,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Sum,
    Mean,
    Scale(f64),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Log => "log",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Scale(_) => "scale",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    // Inputs are empty for leaves and for results that need no gradient.
    inputs: Vec<usize>,
    prim: Option<Primitive>,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients reach it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let requires_grad = value.requires_grad;
        let id = self.push(Node {
            value: Tensor {
                grad: None,
                ..value
            },
            requires_grad,
            inputs: Vec::new(),
            prim: None,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad(true))
    }

    /// Applies `prim` to `inputs` and records the result.
    pub fn apply<'t>(&'t self, prim: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            forward(prim, &vals)?
        };
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let id = self.push(Node {
            value,
            requires_grad,
            inputs: if requires_grad {
                inputs.iter().map(|v| v.id).collect()
            } else {
                Vec::new()
            },
            prim: requires_grad.then_some(prim),
        });
        Ok(Var { tape: self, id })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, found shape {:?}",
                loss_node.value.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if loss_node.requires_grad {
            adj[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(upstream) = adj[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(prim) = node.prim {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
                let partials = backward(prim, &inputs, &node.value, &upstream);
                for (&input, partial) in node.inputs.iter().zip(partials) {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut adj[input] {
                        Some(acc) => {
                            for (a, p) in acc.iter_mut().zip(&partial) {
                                *a += p;
                            }
                        }
                        slot @ None => *slot = Some(partial),
                    }
                }
            }
            // Leaves keep their adjoint; interior buffers are dropped once propagated.
            if node.prim.is_none() {
                adj[id] = Some(upstream);
            }
        }
        Ok(Gradients { adj })
    }

    /// Reverse sweep that adds leaf gradients into `params`.
    pub fn backward(&self, loss: Var<'_>, params: &mut ParamSet, bound: &[Var<'_>]) -> Result<()> {
        let grads = self.gradients(loss)?;
        params.accumulate(bound, &grads)
    }
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.adj.get(var.id).and_then(|a| a.as_deref())
    }

    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        match self.wrt(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.numel()],
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Runs `f` on the stored value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn unary(self, prim: Primitive) -> Result<Var<'t>> {
        self.tape.apply(prim, &[self])
    }

    fn binary(self, prim: Primitive, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(prim, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Mul, rhs)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::MatMul, rhs)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Primitive::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Primitive::Relu)
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(Primitive::Softmax)
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.unary(Primitive::LogSoftmax)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Primitive::Log)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(Primitive::Mean)
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        self.unary(Primitive::Scale(k))
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Slice { axis, start, end })
    }

    /// Columns `start..end` of a matrix.
    pub fn cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.slice(1, start, end)
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        first.tape.apply(Primitive::Concat { axis }, parts)
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        }),
    }
}

fn is_row_broadcast(lhs: &Tensor, rhs: &Tensor) -> bool {
    lhs.shape.len() == 2
        && rhs.shape.len() == 2
        && rhs.shape[0] == 1
        && rhs.shape[1] == lhs.shape[1]
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
        requires_grad: false,
        grad: None,
    }
}

fn arity(prim: Primitive, inputs: &[&Tensor]) -> Result<()> {
    let expected = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => Some(2),
        Primitive::Concat { .. } => None,
        _ => Some(1),
    };
    match expected {
        Some(n) if inputs.len() != n => Err(Error::contract(format!(
            "{} takes {n} inputs, got {}",
            prim.name(),
            inputs.len()
        ))),
        None if inputs.is_empty() => Err(Error::contract("concat of zero tensors")),
        _ => Ok(()),
    }
}

fn elementwise(
    prim: Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape.clone(), data);
    }
    if prim != Primitive::Mul && is_row_broadcast(a, b) {
        let cols = a.shape[1];
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % cols]))
            .collect();
        return Tensor::new(a.shape.clone(), data);
    }
    Err(Error::Dimension {
        op: prim.name(),
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn row_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

fn forward(prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    arity(prim, inputs)?;
    match prim {
        Primitive::Add => elementwise(prim, inputs[0], inputs[1], |x, y| x + y),
        Primitive::Sub => elementwise(prim, inputs[0], inputs[1], |x, y| x - y),
        Primitive::Mul => elementwise(prim, inputs[0], inputs[1], |x, y| x * y),
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mismatch = || Error::Dimension {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            let (m, k) = dims2(a, "matmul").map_err(|_| mismatch())?;
            let (k2, n) = dims2(b, "matmul").map_err(|_| mismatch())?;
            if k != k2 {
                return Err(mismatch());
            }
            Tensor::new(vec![m, n], matmul_raw(&a.data, &b.data, m, k, n))
        }
        Primitive::Tanh => Ok(map(inputs[0], f64::tanh)),
        Primitive::Sigmoid => Ok(map(inputs[0], sigmoid)),
        Primitive::Relu => Ok(map(inputs[0], |v| v.max(0.0))),
        Primitive::Log => Ok(map(inputs[0], f64::ln)),
        Primitive::Softmax | Primitive::LogSoftmax => {
            let x = inputs[0];
            let (_, cols) = dims2(x, prim.name())?;
            let mut data = row_softmax(&x.data, cols);
            if prim == Primitive::LogSoftmax {
                for (row_out, row_in) in data.chunks_mut(cols).zip(x.data.chunks(cols)) {
                    let arg = crate::metrics::argmax(row_in);
                    let max = row_in[arg];
                    // ln_1p keeps tiny losses from collapsing to exactly zero.
                    let rest: f64 = row_in
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != arg)
                        .map(|(_, &v)| (v - max).exp())
                        .sum();
                    let log_norm = rest.ln_1p();
                    for (o, &v) in row_out.iter_mut().zip(row_in) {
                        *o = (v - max) - log_norm;
                    }
                }
            }
            Tensor::new(x.shape.clone(), data)
        }
        Primitive::Sum => Ok(Tensor::scalar(inputs[0].data.iter().sum())),
        Primitive::Mean => {
            let x = inputs[0];
            if x.data.is_empty() {
                return Err(Error::contract("mean of an empty tensor"));
            }
            Ok(Tensor::scalar(
                x.data.iter().sum::<f64>() / x.data.len() as f64,
            ))
        }
        Primitive::Scale(k) => Ok(map(inputs[0], |v| k * v)),
        Primitive::Concat { axis } => concat_forward(inputs, axis),
        Primitive::Slice { axis, start, end } => {
            let x = inputs[0];
            let (r, c) = dims2(x, "slice")?;
            let limit = if axis == 0 { r } else { c };
            if axis > 1 || start > end || end > limit {
                return Err(Error::Dimension {
                    op: "slice",
                    lhs: x.shape.clone(),
                    rhs: vec![axis, start, end],
                });
            }
            if axis == 0 {
                Tensor::new(vec![end - start, c], x.data[start * c..end * c].to_vec())
            } else {
                let w = end - start;
                let mut data = Vec::with_capacity(r * w);
                for row in x.data.chunks(c) {
                    data.extend_from_slice(&row[start..end]);
                }
                Tensor::new(vec![r, w], data)
            }
        }
    }
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let (r0, c0) = dims2(inputs[0], "concat")?;
    if axis > 1 {
        return Err(Error::contract(format!("concat axis {axis} out of range")));
    }
    for t in &inputs[1..] {
        let (r, c) = dims2(t, "concat")?;
        if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
            return Err(Error::Dimension {
                op: "concat",
                lhs: inputs[0].shape.clone(),
                rhs: t.shape.clone(),
            });
        }
    }
    if axis == 0 {
        let rows = inputs.iter().map(|t| t.shape[0]).sum();
        let data = inputs.iter().flat_map(|t| t.data.iter().copied()).collect();
        Tensor::new(vec![rows, c0], data)
    } else {
        let cols: usize = inputs.iter().map(|t| t.shape[1]).sum();
        let mut data = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for t in inputs {
                data.extend_from_slice(t.row_slice(i));
            }
        }
        Tensor::new(vec![r0, cols], data)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Vector-Jacobian products of `prim` for each input, given the upstream adjoint.
fn backward(prim: Primitive, inputs: &[&Tensor], out: &Tensor, up: &[f64]) -> Vec<Vec<f64>> {
    let reduce_rows = |g: &[f64], target: &Tensor| -> Vec<f64> {
        if target.numel() == g.len() {
            return g.to_vec();
        }
        let cols = target.numel();
        let mut acc = vec![0.0; cols];
        for row in g.chunks(cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc
    };
    match prim {
        Primitive::Add => vec![up.to_vec(), reduce_rows(up, inputs[1])],
        Primitive::Sub => {
            let neg: Vec<f64> = up.iter().map(|v| -v).collect();
            vec![up.to_vec(), reduce_rows(&neg, inputs[1])]
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                up.iter().zip(&b.data).map(|(u, y)| u * y).collect(),
                up.iter().zip(&a.data).map(|(u, x)| u * x).collect(),
            ]
        }
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            let bt = transpose(&b.data, k, n);
            let at = transpose(&a.data, m, k);
            vec![matmul_raw(up, &bt, m, n, k), matmul_raw(&at, up, k, m, n)]
        }
        Primitive::Tanh => vec![up
            .iter()
            .zip(&out.data)
            .map(|(u, y)| u * (1.0 - y * y))
            .collect()],
        Primitive::Sigmoid => vec![up
            .iter()
            .zip(&out.data)
            .map(|(u, y)| u * y * (1.0 - y))
            .collect()],
        Primitive::Relu => vec![up
            .iter()
            .zip(&inputs[0].data)
            .map(|(u, &x)| if x > 0.0 { *u } else { 0.0 })
            .collect()],
        Primitive::Log => vec![up.iter().zip(&inputs[0].data).map(|(u, x)| u / x).collect()],
        Primitive::Softmax => {
            let cols = out.shape[1];
            let mut g = Vec::with_capacity(up.len());
            for (urow, yrow) in up.chunks(cols).zip(out.data.chunks(cols)) {
                let dot: f64 = urow.iter().zip(yrow).map(|(u, y)| u * y).sum();
                g.extend(urow.iter().zip(yrow).map(|(u, y)| y * (u - dot)));
            }
            vec![g]
        }
        Primitive::LogSoftmax => {
            let cols = out.shape[1];
            let mut g = Vec::with_capacity(up.len());
            for (urow, lrow) in up.chunks(cols).zip(out.data.chunks(cols)) {
                let total: f64 = urow.iter().sum();
                g.extend(urow.iter().zip(lrow).map(|(u, l)| u - l.exp() * total));
            }
            vec![g]
        }
        Primitive::Sum => vec![vec![up[0]; inputs[0].numel()]],
        Primitive::Mean => {
            let n = inputs[0].numel();
            vec![vec![up[0] / n as f64; n]]
        }
        Primitive::Scale(k) => vec![up.iter().map(|u| k * u).collect()],
        Primitive::Concat { axis } => {
            let cols = out.shape[1];
            if axis == 0 {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let part = up[offset..offset + t.numel()].to_vec();
                        offset += t.numel();
                        part
                    })
                    .collect()
            } else {
                let mut col = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let w = t.shape[1];
                        let mut part = Vec::with_capacity(t.numel());
                        for row in up.chunks(cols) {
                            part.extend_from_slice(&row[col..col + w]);
                        }
                        col += w;
                        part
                    })
                    .collect()
            }
        }
        Primitive::Slice { axis, start, end } => {
            let x = inputs[0];
            let c = x.shape[1];
            let mut g = vec![0.0; x.numel()];
            if axis == 0 {
                g[start * c..end * c].copy_from_slice(up);
            } else {
                let w = end - start;
                for (grow, urow) in g.chunks_mut(c).zip(up.chunks(w)) {
                    grow[start..end].copy_from_slice(urow);
                }
            }
            vec![g]
        }
    }
}

/// Identifier of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-requiring leaf, in id order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect()
    }

    /// Per-parameter gradient buffers extracted from one sweep, zeros where unused.
    pub fn collect(&self, bound: &[Var<'_>], grads: &Gradients) -> Vec<Vec<f64>> {
        bound.iter().map(|&v| grads.wrt_or_zeros(v)).collect()
    }

    pub fn accumulate(&mut self, bound: &[Var<'_>], grads: &Gradients) -> Result<()> {
        let flat = self.collect(bound, grads);
        self.accumulate_flat(&flat)
    }

    pub fn accumulate_flat(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        zero_grads(self.tensors.iter_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[1.0], &[1.0]]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.data(), vec![3.0, 7.0]);
    }

    #[test]
    fn tanh_at_origin_and_uniform_softmax() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::row(&[0.0]));
        assert_eq!(z.tanh().unwrap().data(), vec![0.0]);
        let s = tape
            .constant(Tensor::row(&[0.0, 0.0, 0.0]))
            .softmax()
            .unwrap();
        for v in s.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_operation_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = a.add(c).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let w = tape.variable(Tensor::row(&[1.0, 2.0, 3.0]));
        let loss = w.mul(w).unwrap().sum().unwrap();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn tanh_gradient_matches_finite_difference() {
        let eval = |x: f64| x.tanh();
        let h = 1e-6;
        let fd = (eval(0.5 + h) - eval(0.5 - h)) / (2.0 * h);
        let tape = Tape::new();
        let w = tape.variable(Tensor::row(&[0.5]));
        let loss = w.tanh().unwrap().sum().unwrap();
        let g = tape.gradients(loss).unwrap().wrt(w).unwrap()[0];
        assert_abs_diff_eq!(g, fd, epsilon = 1e-8);
        assert_abs_diff_eq!(g, 1.0 - 0.5f64.tanh().powi(2), epsilon = 1e-15);
        assert_abs_diff_eq!(g, 0.78645, epsilon = 1e-5);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.variable(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.gradients(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::row(&[1.0, 2.0, 3.0]));
        let run = |params: &mut ParamSet| {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let loss = bound[0].mul(bound[0]).unwrap().sum().unwrap();
            tape.backward(loss, params, &bound).unwrap();
        };
        run(&mut params);
        run(&mut params);
        assert_eq!(params.get(ParamId(0)).grad().unwrap(), &[4.0, 8.0, 12.0]);
        params.zero_grads();
        assert_eq!(params.get(ParamId(0)).grad().unwrap(), &[0.0, 0.0, 0.0]);
        run(&mut params);
        assert_eq!(params.get(ParamId(0)).grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_grads_on_fresh_tensors() {
        let mut ts = vec![Tensor::zeros(&[2, 2]), Tensor::row(&[1.0])];
        zero_grads(ts.iter_mut());
        for t in &ts {
            assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn constants_are_not_recorded_for_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(&[1.0]));
        let b = a.tanh().unwrap();
        assert!(!b.requires_grad());
        let w = tape.variable(Tensor::row(&[2.0]));
        let loss = w.mul(b).unwrap().sum().unwrap();
        let g = tape.gradients(loss).unwrap();
        assert!(g.wrt(a).is_none());
        assert_abs_diff_eq!(g.wrt(w).unwrap()[0], 1f64.tanh(), epsilon = 1e-15);
    }

    #[test]
    fn row_broadcast_bias_gradient_sums_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let b = tape.variable(Tensor::row(&[0.5, -0.5]));
        let loss = x.add(b).unwrap().sum().unwrap();
        assert_eq!(tape.gradients(loss).unwrap().wrt(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let tape = Tape::new();
        let a = tape.variable(t(&[&[1.0, 2.0]]));
        let b = tape.variable(t(&[&[3.0]]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.data(), vec![1.0, 2.0, 3.0]);
        let s = c.cols(1, 3).unwrap();
        let loss = s.mul(s).unwrap().sum().unwrap();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[0.0, 4.0]);
        assert_eq!(g.wrt(b).unwrap(), &[6.0]);
        let rows = Var::concat(&[a, a], 0).unwrap();
        assert_eq!(rows.shape(), vec![2, 2]);
    }

    #[test]
    fn log_softmax_is_stable_for_large_margins() {
        let tape = Tape::new();
        let l = tape
            .constant(Tensor::row(&[1000.0, 0.0]))
            .log_softmax()
            .unwrap();
        let d = l.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], -1000.0);
    }
}
