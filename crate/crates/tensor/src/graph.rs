//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly when it is recorded, so a node's value (and any
//! activation its backward rule needs) is available as soon as the node id is
//! returned. [`Graph::backward`] walks the tape in reverse.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, Layout};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Power,
    Sum,
    Mean,
    Broadcast,
    Reshape,
    Transpose,
    Concat,
    Slice,
    GatherRows,
    Gelu,
    Relu,
    Softmax,
    LogSoftmax,
    LayerNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Power,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Broadcast,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::GatherRows,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Power => "power",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Broadcast => "broadcast",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::GatherRows => "gather_rows",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { shared_rhs: bool },
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Power(f64),
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Broadcast,
    Reshape,
    Transpose(usize, usize),
    Concat(usize),
    Slice { axis: usize, start: usize },
    GatherRows(Vec<usize>),
    Gelu,
    Relu,
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { axis: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Neg => OpKind::Neg,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Sqrt => OpKind::Sqrt,
            Op::Power(_) => OpKind::Power,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Broadcast => OpKind::Broadcast,
            Op::Reshape => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::Gelu => OpKind::Gelu,
            Op::Relu => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    /// Per-row statistics kept for backward (layer-norm reciprocal std).
    saved: Vec<T>,
}

/// Gradients of a scalar output with respect to every trainable leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::lit(SQRT_2_OVER_PI) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// A tape of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Binds a tensor as a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                node: self.nodes.len(),
                op: "leaf",
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: trainable,
            saved: Vec::new(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<T>, saved: Vec<T>) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                node,
                op: op.kind().name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            saved,
        });
        Ok(Var(node))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(v.0))
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., m, k] @ b[k, n]` or batched `a[..., m, k] @ b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            kernels::gemm(av, bv, &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            Op::MatMul { shared_rhs },
            vec![a, b],
            Tensor::from_parts(shape, out),
            Vec::new(),
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = kernels::broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(op.kind().name(), format!("{sa:?} vs {sb:?}")))?;
        let total = numel(&out_shape);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let ea;
        let eb;
        let av = if kernels::layout(&sa, &out_shape) == Layout::General {
            ea = kernels::expand(av, &sa, &out_shape);
            &ea[..]
        } else {
            av
        };
        let bv = if kernels::layout(&sb, &out_shape) == Layout::General {
            eb = kernels::expand(bv, &sb, &out_shape);
            &eb[..]
        } else {
            bv
        };
        let (na, nb) = (av.len(), bv.len());
        let out: Vec<T> = if na == total && nb == total {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if na == total {
            (0..total).map(|i| f(av[i], bv[i % nb])).collect()
        } else if nb == total {
            (0..total).map(|i| f(av[i % na], bv[i])).collect()
        } else {
            (0..total).map(|i| f(av[i % na], bv[i % nb])).collect()
        };
        self.push(op, vec![a, b], Tensor::from_parts(out_shape, out), Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(f);
        self.push(op, vec![a], value, Vec::new())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sqrt, a, |x| x.sqrt())
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let pt = T::lit(p);
        self.unary(Op::Power(p), a, move |x| x.powf(pt))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Gelu, a, gelu_scalar)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| if x > T::zero() { x } else { T::zero() })
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c)?;
        self.mul(a, s)
    }

    // ---- reductions -----------------------------------------------------

    fn reduce(&mut self, a: Var, axis: Option<usize>, keepdim: bool, mean: bool) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let x = self.value(a).data();
        let (value, op) = match axis {
            None => {
                let mut s: T = x.iter().copied().sum();
                if mean {
                    s = s / T::lit(x.len() as f64);
                }
                let shape = if keepdim { vec![1; shape.len()] } else { Vec::new() };
                let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
                (Tensor::from_parts(shape, vec![s]), op)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(shape_err("sum", format!("axis {ax} of {shape:?}")));
                }
                let (outer, len, inner) = kernels::split_axis(&shape, ax);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                if mean {
                    let inv = T::one() / T::lit(len as f64);
                    out.iter_mut().for_each(|v| *v = *v * inv);
                }
                let mut oshape = shape.clone();
                if keepdim {
                    oshape[ax] = 1;
                } else {
                    oshape.remove(ax);
                }
                let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
                (Tensor::from_parts(oshape, out), op)
            }
        };
        self.push(op, vec![a], value, Vec::new())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(a, Some(axis), keepdim, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(a, Some(axis), keepdim, true)
    }

    // ---- shape ----------------------------------------------------------

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let sa = self.shape(a).to_vec();
        match kernels::broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast", format!("{sa:?} -> {shape:?}"))),
        }
        let out = kernels::expand(self.value(a).data(), &sa, shape);
        self.push(
            Op::Broadcast,
            vec![a],
            Tensor::from_parts(shape.to_vec(), out),
            Vec::new(),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        self.push(Op::Reshape, vec![a], value, Vec::new())
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(shape_err("transpose", format!("axes {ax0},{ax1} of {shape:?}")));
        }
        let (out, oshape) = kernels::swap_axes(self.value(a).data(), &shape, ax0, ax1);
        self.push(
            Op::Transpose(ax0, ax1),
            vec![a],
            Tensor::from_parts(oshape, out),
            Vec::new(),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total_len = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            total_len += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total_len;
        self.push(
            Op::Concat(axis),
            parts.to_vec(),
            Tensor::from_parts(shape, out),
            Vec::new(),
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        self.push(
            Op::Slice { axis, start },
            vec![a],
            Tensor::from_parts(oshape, out),
            Vec::new(),
        )
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(shape_err(
                "gather_rows",
                format!("{} indices into {shape:?}", indices.len()),
            ));
        }
        let w: usize = shape[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        self.push(
            Op::GatherRows(indices.to_vec()),
            vec![a],
            Tensor::from_parts(oshape, out),
            Vec::new(),
        )
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s = s + e;
                }
                if log {
                    let lse = mx + s.ln();
                    for j in 0..len {
                        out[at(j)] = x[at(j)] - lse;
                    }
                } else {
                    let inv = T::one() / s;
                    for j in 0..len {
                        out[at(j)] = out[at(j)] * inv;
                    }
                }
            }
        }
        let op = if log { Op::LogSoftmax(axis) } else { Op::Softmax(axis) };
        self.push(op, vec![a], Tensor::from_parts(shape, out), Vec::new())
    }

    /// Normalises to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("layer_norm", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        let mut rstds = Vec::with_capacity(outer * inner);
        let inv_len = T::one() / T::lit(len as f64);
        let eps = T::lit(eps);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mean = T::zero();
                for j in 0..len {
                    mean = mean + x[at(j)];
                }
                mean = mean * inv_len;
                let mut var = T::zero();
                for j in 0..len {
                    let d = x[at(j)] - mean;
                    var = var + d * d;
                }
                var = var * inv_len;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..len {
                    out[at(j)] = (x[at(j)] - mean) * rstd;
                }
                rstds.push(rstd);
            }
        }
        self.push(
            Op::LayerNorm { axis },
            vec![a],
            Tensor::from_parts(shape, out),
            rstds,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Gradient of the scalar `output` with respect to every trainable leaf.
    /// Leaves the output does not depend on receive zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.check(output)?;
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(TensorError::NotScalar(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::one()]);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.vjp(node, &g);
            for (inp, ig) in node.inputs.iter().zip(contributions) {
                let Some(ig) = ig else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(ig) {
                            *a = *a + v;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); numel(&shape)]);
                out.insert(Var(id), Tensor::from_parts(shape, g));
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products for each input of `node` given its output
    /// gradient `g`. `None` for inputs that do not require gradients.
    fn vjp(&self, node: &Node<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let need = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { shared_rhs } => {
                let (a, b) = (val(0), val(1));
                let sa = a.shape();
                let sb = b.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let ga = need(0).then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    if *shared_rhs {
                        kernels::gemm_nt(g, b.data(), &mut ga, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &b.data()[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    ga
                });
                let gb = need(1).then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    if *shared_rhs {
                        kernels::gemm_tn(a.data(), g, &mut gb, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::gemm_tn(
                                &a.data()[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }
            Op::Add | Op::Sub => {
                let neg = matches!(node.op, Op::Sub);
                let ga = need(0).then(|| kernels::sum_to_shape(g, out_shape, val(0).shape()));
                let gb = need(1).then(|| {
                    let mut r = kernels::sum_to_shape(g, out_shape, val(1).shape());
                    if neg {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                let ga = need(0).then(|| {
                    let be = kernels::expand(b.data(), b.shape(), out_shape);
                    let p: Vec<T> = g.iter().zip(&be).map(|(&x, &y)| x * y).collect();
                    kernels::sum_to_shape(&p, out_shape, a.shape())
                });
                let gb = need(1).then(|| {
                    let ae = kernels::expand(a.data(), a.shape(), out_shape);
                    let p: Vec<T> = g.iter().zip(&ae).map(|(&x, &y)| x * y).collect();
                    kernels::sum_to_shape(&p, out_shape, b.shape())
                });
                vec![ga, gb]
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                let be = kernels::expand(b.data(), b.shape(), out_shape);
                let ga = need(0).then(|| {
                    let p: Vec<T> = g.iter().zip(&be).map(|(&x, &d)| x / d).collect();
                    kernels::sum_to_shape(&p, out_shape, a.shape())
                });
                let gb = need(1).then(|| {
                    let p: Vec<T> = g
                        .iter()
                        .zip(&be)
                        .zip(y)
                        .map(|((&x, &d), &q)| -x * q / d)
                        .collect();
                    kernels::sum_to_shape(&p, out_shape, b.shape())
                });
                vec![ga, gb]
            }
            Op::Neg => vec![Some(g.iter().map(|&v| -v).collect())],
            Op::Exp => vec![Some(g.iter().zip(y).map(|(&a, &b)| a * b).collect())],
            Op::Log => {
                let x = val(0).data();
                vec![Some(g.iter().zip(x).map(|(&a, &b)| a / b).collect())]
            }
            Op::Sqrt => {
                let half = T::lit(0.5);
                vec![Some(g.iter().zip(y).map(|(&a, &b)| a * half / b).collect())]
            }
            Op::Power(p) => {
                let x = val(0).data();
                let pt = T::lit(*p);
                let pm1 = T::lit(*p - 1.0);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&a, &b)| a * pt * b.powf(pm1))
                        .collect(),
                )]
            }
            Op::Gelu => {
                let x = val(0).data();
                vec![Some(
                    g.iter().zip(x).map(|(&a, &b)| a * gelu_grad(b)).collect(),
                )]
            }
            Op::Relu => {
                let x = val(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&a, &b)| if b > T::zero() { a } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let in_shape = val(0).shape();
                let n_in = numel(in_shape);
                let r = match axis {
                    None => {
                        let mut v = g[0];
                        if mean {
                            v = v / T::lit(n_in as f64);
                        }
                        vec![v; n_in]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = kernels::split_axis(in_shape, *ax);
                        let scale = if mean {
                            T::one() / T::lit(len as f64)
                        } else {
                            T::one()
                        };
                        let mut r = Vec::with_capacity(n_in);
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for _ in 0..len {
                                r.extend(src.iter().map(|&v| v * scale));
                            }
                        }
                        r
                    }
                };
                vec![Some(r)]
            }
            Op::Broadcast => vec![Some(kernels::sum_to_shape(g, out_shape, val(0).shape()))],
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Transpose(a, b) => {
                let (r, _) = kernels::swap_axes(g, out_shape, *a, *b);
                vec![Some(r)]
            }
            Op::Concat(axis) => {
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let len = val(i).shape()[*axis];
                    if need(i) {
                        let mut r = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            r.extend_from_slice(&g[s..s + len * inner]);
                        }
                        res.push(Some(r));
                    } else {
                        res.push(None);
                    }
                    offset += len;
                }
                res
            }
            Op::Slice { axis, start } => {
                let in_shape = val(0).shape();
                let (outer, len, inner) = kernels::split_axis(in_shape, *axis);
                let width = out_shape[*axis];
                let mut r = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    r[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                vec![Some(r)]
            }
            Op::GatherRows(indices) => {
                let in_shape = val(0).shape();
                let w: usize = in_shape[1..].iter().product();
                let mut r = vec![T::zero(); numel(in_shape)];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, &s) in r[i * w..(i + 1) * w].iter_mut().zip(&g[k * w..(k + 1) * w]) {
                        *d = *d + s;
                    }
                }
                vec![Some(r)]
            }
            Op::Softmax(axis) | Op::LogSoftmax(axis) => {
                let log = matches!(node.op, Op::LogSoftmax(_));
                let (outer, len, inner) = kernels::split_axis(out_shape, *axis);
                let mut r = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        if log {
                            let mut s = T::zero();
                            for j in 0..len {
                                s = s + g[at(j)];
                            }
                            for j in 0..len {
                                r[at(j)] = g[at(j)] - y[at(j)].exp() * s;
                            }
                        } else {
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot = dot + g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                r[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                vec![Some(r)]
            }
            Op::LayerNorm { axis } => {
                let (outer, len, inner) = kernels::split_axis(out_shape, *axis);
                let inv_len = T::one() / T::lit(len as f64);
                let mut r = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let rstd = node.saved[o * inner + i];
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for j in 0..len {
                            mg = mg + g[at(j)];
                            mgy = mgy + g[at(j)] * y[at(j)];
                        }
                        mg = mg * inv_len;
                        mgy = mgy * inv_len;
                        for j in 0..len {
                            r[at(j)] = rstd * (g[at(j)] - mg - y[at(j)] * mgy);
                        }
                    }
                }
                vec![Some(r)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 4], &[3.0; 4])).unwrap();
        let n = g.layer_norm(a, 1, 1e-6).unwrap();
        assert!(g.value(n).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0])).unwrap();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_bilinear_is_other_factor() {
        let mut g = Graph::new();
        let xv = [1.0, 2.0, -3.0];
        let yv = [0.5, -1.5, 4.0];
        let x = g.param(t(&[3], &xv)).unwrap();
        let y = g.constant(t(&[3], &yv)).unwrap();
        let p = g.mul(x, y).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &yv);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 1.0])).unwrap();
        let err = g.log(x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { node: 1, op: "log" });
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(t(&[3, 2], &[0.0; 6])).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let p = g.mul(x, c).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.len(), 1);
    }
}
