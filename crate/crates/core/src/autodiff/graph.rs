//! Reverse-mode tape.
//!
//! Every primitive appends one node to the tape; node ids are therefore a
//! topological order and the backward sweep simply walks them in reverse.
//! Tangents for forward mode are themselves recorded as ordinary nodes (see
//! [`super::dual`]), so a loss containing a JVP is differentiable in the
//! parameters without any special casing.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{
    broadcast_binary, broadcast_index, matmul, reduce_to_shape, softmax_last, sum_axis_keepdim, Tensor,
};
use crate::error::{CfmError, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Relu(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    SumAll(usize),
    SumAxis(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Softmax(usize),
    Detach,
    Opaque(&'static str),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::MatMul(..) => "matmul",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Softmax(..) => "softmax",
            Op::Detach => "stop_gradient",
            Op::Opaque(name) => name,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-use recording of primitive operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let v = self.value_of(a.id).map(f);
        self.push(v, op, self.requires(a.id))
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let (va, vb) = (self.value_of(a.id), self.value_of(b.id));
        let v = broadcast_binary(&va, &vb, f).unwrap_or_else(|e| panic!("{}: {e}", op.name()));
        let rg = self.requires(a.id) || self.requires(b.id);
        self.push(v, op, rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = loss.id + 1;
        if nodes[loss.id].value.len() != 1 {
            return Err(CfmError::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        if !nodes[loss.id].value.is_finite() {
            return Err(CfmError::NonFiniteLoss("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| nodes[i].value.as_ref();
            let acc = |i: usize, contrib: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Detach => {}
                Op::Opaque(name) => return Err(CfmError::UnsupportedPrimitive((*name).to_string())),
                Op::Add(a, b) => {
                    acc(*a, reduce_to_shape(&g, val(*a).shape()), &mut grads);
                    acc(*b, reduce_to_shape(&g, val(*b).shape()), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to_shape(&g, val(*a).shape()), &mut grads);
                    acc(*b, reduce_to_shape(&g.scale(-1.0), val(*b).shape()), &mut grads);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        let ga = broadcast_binary(&g, val(*b), |x, y| x * y)?;
                        acc(*a, reduce_to_shape(&ga, val(*a).shape()), &mut grads);
                    }
                    if nodes[*b].requires_grad {
                        let gb = broadcast_binary(&g, val(*a), |x, y| x * y)?;
                        acc(*b, reduce_to_shape(&gb, val(*b).shape()), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    if nodes[*a].requires_grad {
                        let ga = broadcast_binary(&g, val(*b), |x, y| x / y)?;
                        acc(*a, reduce_to_shape(&ga, val(*a).shape()), &mut grads);
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -out / b
                        let t = broadcast_binary(&g, &node.value, |x, y| -x * y)?;
                        let gb = broadcast_binary(&t, val(*b), |x, y| x / y)?;
                        acc(*b, reduce_to_shape(&gb, val(*b).shape()), &mut grads);
                    }
                }
                Op::Neg(a) => acc(*a, g.scale(-1.0), &mut grads),
                Op::Scale(a, c) => acc(*a, g.scale(*c), &mut grads),
                Op::AddConst(a) => acc(*a, g, &mut grads),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)?, &mut grads),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)?, &mut grads),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?, &mut grads),
                Op::Sin(a) => acc(*a, g.zip_map(val(*a), |x, y| x * y.cos())?, &mut grads),
                Op::Cos(a) => acc(*a, g.zip_map(val(*a), |x, y| -x * y.sin())?, &mut grads),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |x, y| x / (2.0 * y))?, &mut grads),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?, &mut grads),
                Op::ClampMin(a, c) => {
                    let c = *c;
                    acc(*a, g.zip_map(val(*a), |x, y| if y > c { x } else { 0.0 })?, &mut grads)
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(*a, matmul(&g, val(*b), false, true)?, &mut grads);
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, matmul(val(*a), &g, true, false)?, &mut grads);
                    }
                }
                Op::SumAll(a) => acc(*a, Tensor::full(val(*a).shape(), g.item()), &mut grads),
                Op::SumAxis(a) | Op::BroadcastTo(a) => {
                    let target = val(*a).shape();
                    let expanded = if matches!(node.op, Op::SumAxis(..)) {
                        let idx = broadcast_index(g.shape(), target);
                        Tensor::new(target.to_vec(), idx.iter().map(|&i| g.data()[i]).collect())?
                    } else {
                        reduce_to_shape(&g, target)
                    };
                    acc(*a, expanded, &mut grads);
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?, &mut grads),
                Op::Concat(parts) => {
                    let total = *g.shape().last().unwrap();
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for &p in parts {
                        let w = *val(p).shape().last().unwrap();
                        if nodes[p].requires_grad {
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            acc(p, Tensor::new(val(p).shape().to_vec(), data)?, &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = g.zip_map(y, |x, y| x * y)?;
                    let s = sum_axis_keepdim(&gy, y.ndim() - 1);
                    let centered = broadcast_binary(&g, &s, |x, y| x - y)?;
                    acc(*a, centered.zip_map(y, |x, y| x * y)?, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to every leaf that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph.unary(self, Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_const(self, c: f64) -> Var<'g> {
        self.graph.unary(self, Op::AddConst(self.id), |v| v + c)
    }

    pub fn exp(self) -> Var<'g> {
        self.graph.unary(self, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.graph.unary(self, Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'g> {
        self.graph.unary(self, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sin(self) -> Var<'g> {
        self.graph.unary(self, Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'g> {
        self.graph.unary(self, Op::Cos(self.id), f64::cos)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.graph.unary(self, Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.unary(self, Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn clamp_min(self, c: f64) -> Var<'g> {
        self.graph.unary(self, Op::ClampMin(self.id, c), |v| v.max(c))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    /// Forward-only elementwise map with no registered derivative.
    ///
    /// Differentiating through the result fails with
    /// [`CfmError::UnsupportedPrimitive`].
    pub fn opaque_map(self, name: &'static str, f: impl Fn(f64) -> f64) -> Var<'g> {
        self.graph.unary(self, Op::Opaque(name), f)
    }

    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), rhs.value());
        let v = matmul(&a, &b, false, false).unwrap_or_else(|e| panic!("matmul: {e}"));
        let rg = self.requires_grad() || rhs.requires_grad();
        self.graph.push(v, Op::MatMul(self.id, rhs.id), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.push(v, Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let v = sum_axis_keepdim(&self.value(), axis);
        self.graph.push(v, Op::SumAxis(self.id), self.requires_grad())
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        let src = self.value();
        let idx = broadcast_index(src.shape(), shape);
        let v = Tensor::new(shape.to_vec(), idx.iter().map(|&i| src.data()[i]).collect())
            .unwrap_or_else(|e| panic!("broadcast_to: {e}"));
        self.graph.push(v, Op::BroadcastTo(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self.value().reshape(shape).unwrap_or_else(|e| panic!("reshape: {e}"));
        self.graph.push(v, Op::Reshape(self.id), self.requires_grad())
    }

    /// Concatenation along the last axis; all leading extents must agree.
    pub fn concat(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].ndim() - 1];
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        for v in &values {
            assert_eq!(&v.shape()[..v.ndim() - 1], lead, "concat: leading extents differ");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| p.requires_grad());
        graph.push(Tensor::new(shape, data).unwrap(), Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let v = softmax_last(&self.value());
        self.graph.push(v, Op::Softmax(self.id), self.requires_grad())
    }

    /// Identity on values; blocks every gradient and tangent.
    pub fn detach(self) -> Var<'g> {
        let v = (*self.value()).clone();
        self.graph.push(v, Op::Detach, false)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $variant:ident, $f:expr) => {
        impl<'g> $tr for Var<'g> {
            type Output = Var<'g>;
            fn $m(self, rhs: Var<'g>) -> Var<'g> {
                self.graph.binary(self, rhs, Op::$variant(self.id, rhs.id), $f)
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.graph.unary(self, Op::Neg(self.id), |v| -v)
    }
}

impl<'g> Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, c: f64) -> Var<'g> {
        self.scale(c)
    }
}

impl<'g> Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, c: f64) -> Var<'g> {
        self.add_const(c)
    }
}
