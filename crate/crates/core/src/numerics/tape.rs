//! Reverse-mode differentiation over dense tensors.
//!
//! Operations are appended to a [`Tape`] in evaluation order, which is already a
//! topological order; [`Tape::backward`] walks it once in reverse.

use super::tensor::gemm;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Exp,
    Neg,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Operation with a hand-written vector-Jacobian product. The forward value is
/// computed by the caller and handed to [`Tape::custom`].
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient for each input, in the order the inputs were given.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Reshape(Var),
    Custom(Box<dyn CustomOp<T>>, Vec<Var>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient follows `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = self.value(a);
        let value = match op {
            UnaryOp::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryOp::Sigmoid => x.map(sigmoid),
            UnaryOp::Exp => x.map(T::exp),
            UnaryOp::Neg => x.map(|v| -v),
            UnaryOp::Square => x.map(|v| v * v),
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    /// Elementwise binary op. Operands must have equal shapes, or one of them
    /// must hold a single element which is then broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let f = |p: T, q: T| match op {
            BinaryOp::Add => p + q,
            BinaryOp::Sub => p - q,
            BinaryOp::Mul => p * q,
        };
        let value = if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::from_vec(x.shape(), data)?
        } else if y.is_scalar() {
            let q = y.item();
            x.map(|p| f(p, q))
        } else if x.is_scalar() {
            let p = x.item();
            y.map(|q| f(p, q))
        } else {
            return Err(Error::Shape { op: "elementwise", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|v| v * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Add a constant.
    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds the single-row `row` to every row of matrix `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let (m, n) = x.dims2()?;
        if r.numel() != n {
            return Err(Error::Shape { op: "add_row", lhs: x.shape().to_vec(), rhs: r.shape().to_vec() });
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (v, &b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_vec(&[m, n], data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / T::lit(x.numel() as f64));
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, p) = x.dims2()?;
        let (m2, q) = y.dims2()?;
        if m != m2 {
            return Err(Error::Shape { op: "concat_cols", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&x.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&y.data()[i * q..(i + 1) * q]);
        }
        let value = Tensor::from_vec(&[m, p + q], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2()?;
        if start >= end || end > n {
            return Err(Error::contract(format!("column slice {start}..{end} of width {n}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x.data()[i * n + start..i * n + end]);
        }
        let value = Tensor::from_vec(&[m, w], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Propagates adjoints from the scalar `loss` to every node that requires a
    /// gradient. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                if self.rg(*a) {
                    let x = val(*a);
                    let y = &node.value;
                    let d: Vec<T> = match op {
                        UnaryOp::Relu => zip3(g, x, y, |g, x, _| if x > T::zero() { g } else { T::zero() }),
                        UnaryOp::Sigmoid => zip3(g, x, y, |g, _, y| g * y * (T::one() - y)),
                        UnaryOp::Exp => zip3(g, x, y, |g, _, y| g * y),
                        UnaryOp::Neg => g.data().iter().map(|&g| -g).collect(),
                        UnaryOp::Square => zip3(g, x, y, |g, x, _| g * (x + x)),
                    };
                    accumulate(grads, *a, Tensor::from_vec(x.shape(), d)?);
                }
            }
            Op::Binary(op, a, b) => {
                let (x, y) = (val(*a), val(*b));
                let da: Option<Tensor<T>> = self.rg(*a).then(|| match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => mul_broadcast(g, y),
                });
                let db: Option<Tensor<T>> = self.rg(*b).then(|| match op {
                    BinaryOp::Add => g.clone(),
                    BinaryOp::Sub => g.map(|v| -v),
                    BinaryOp::Mul => mul_broadcast(g, x),
                });
                if let Some(d) = da {
                    accumulate(grads, *a, reduce_to(d, x));
                }
                if let Some(d) = db {
                    accumulate(grads, *b, reduce_to(d, y));
                }
            }
            Op::Scale(a, k) => {
                if self.rg(*a) {
                    let k = *k;
                    accumulate(grads, *a, g.map(|v| v * k));
                }
            }
            Op::AddScalar(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if self.rg(*a) {
                    // grad_a = g · bᵀ
                    gemm_accumulate(grads, *a, x.shape(), g, false, y, true);
                }
                if self.rg(*b) {
                    // grad_b = aᵀ · g
                    gemm_accumulate(grads, *b, y.shape(), x, true, g, false);
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*row) {
                    let r = val(*row);
                    let n = r.numel();
                    let mut d = vec![T::zero(); n];
                    for chunk in g.data().chunks_exact(n) {
                        for (acc, &v) in d.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *row, Tensor::from_vec(r.shape(), d)?);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()));
                }
            }
            Op::Mean(a) => {
                if self.rg(*a) {
                    let x = val(*a);
                    let v = g.item() / T::lit(x.numel() as f64);
                    accumulate(grads, *a, Tensor::full(x.shape(), v));
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = val(*a).dims2()?;
                let q = val(*b).cols();
                if self.rg(*a) {
                    let mut d = Vec::with_capacity(m * p);
                    for r in 0..m {
                        d.extend_from_slice(&g.data()[r * (p + q)..r * (p + q) + p]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(&[m, p], d)?);
                }
                if self.rg(*b) {
                    let mut d = Vec::with_capacity(m * q);
                    for r in 0..m {
                        d.extend_from_slice(&g.data()[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[m, q], d)?);
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let x = val(*a);
                    let (m, n) = x.dims2()?;
                    let w = g.cols();
                    let mut d = vec![T::zero(); m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(&[m, n], d)?);
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone().reshaped(val(*a).shape())?);
                }
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let ds = op.backward(&values, &node.value, g);
                for (&v, d) in inputs.iter().zip(ds) {
                    if let (true, Some(d)) = (self.rg(v), d) {
                        if d.shape() != val(v).shape() {
                            return Err(Error::Shape {
                                op: op.name(),
                                lhs: val(v).shape().to_vec(),
                                rhs: d.shape().to_vec(),
                            });
                        }
                        accumulate(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`]. Every leaf that required a gradient
/// has one, zero-filled when no path reached it.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip3<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, y: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Vec<T> {
    g.data().iter().zip(x.data()).zip(y.data()).map(|((&g, &x), &y)| f(g, x, y)).collect()
}

fn mul_broadcast<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.shape() == g.shape() {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Tensor::from_vec(g.shape(), data).expect("same shape")
    } else {
        let k = other.item();
        g.map(|v| v * k)
    }
}

/// Sums a broadcast gradient back down to a single-element operand.
fn reduce_to<T: Scalar>(d: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if d.shape() == target.shape() {
        d
    } else {
        Tensor::full(target.shape(), d.sum())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn gemm_accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) {
    match &mut grads[v.0] {
        Some(acc) => gemm(a, ta, b, tb, T::one(), T::one(), acc),
        slot @ None => {
            let mut out = Tensor::zeros(shape);
            gemm(a, ta, b, tb, T::one(), T::zero(), &mut out);
            *slot = Some(out);
        }
    }
}
