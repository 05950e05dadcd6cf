//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape of primitive operations; insertion
//! order is topological order. A backward pass does not write raw gradient
//! buffers: it *emits further primitive ops onto the same graph*, so the
//! returned gradients are themselves [`DiffValue`]s and can be differentiated
//! again. That makes second-order quantities (gradients of losses defined on
//! vector-Jacobian products) structural rather than special-cased.
//!
//! Every primitive's backward rule is closed over the primitive set: the
//! adjoint of a convolution is expressed through the two convolution adjoint
//! kernels, the adjoint of a slice is a concat with zero blocks, reductions
//! unreduce through broadcasts, and max-like selections scatter through
//! saved indices (constants with zero derivative almost everywhere).

pub mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, SibError};
use crate::tensor::{broadcast_shapes, Tensor};

/// Primitive operation kinds, attributes included.
#[derive(Clone, Debug)]
pub enum Op {
    /// Input or parameter leaf.
    Leaf,
    /// In-graph constant (no gradient flows into it).
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    Matmul,
    Transpose,
    Reshape { shape: Vec<usize> },
    BroadcastTo { shape: Vec<usize> },
    SumAxes { axes: Vec<usize>, keepdims: bool },
    MeanAxes { axes: Vec<usize>, keepdims: bool },
    MaxAxes { axes: Vec<usize>, keepdims: bool },
    MinAxes { axes: Vec<usize>, keepdims: bool },
    /// Temperature softmax over the last axis.
    Softmax { tau: f64 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Conv2d { stride: usize, pad: usize },
    Conv2dGradInput { stride: usize, pad: usize, hw: (usize, usize) },
    Conv2dGradWeight { stride: usize, pad: usize, khw: (usize, usize) },
    AvgPool2d { k: usize, stride: usize },
    AvgPool2dGrad { k: usize, stride: usize, hw: (usize, usize) },
    MaxPool2d { k: usize, stride: usize },
    /// out[indices[i]] += in[i]; gradient of max-like selections.
    ScatterFlat { indices: Rc<Vec<usize>>, shape: Vec<usize> },
    /// out[i] = in[indices[i]]; adjoint of `ScatterFlat`.
    GatherFlat { indices: Rc<Vec<usize>>, shape: Vec<usize> },
    GaussianBlur3,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::SumAxes { .. } => "sum",
            Op::MeanAxes { .. } => "mean",
            Op::MaxAxes { .. } => "max",
            Op::MinAxes { .. } => "min",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dGradInput { .. } => "conv2d_grad_input",
            Op::Conv2dGradWeight { .. } => "conv2d_grad_weight",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::AvgPool2dGrad { .. } => "avg_pool2d_grad",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::ScatterFlat { .. } => "scatter_flat",
            Op::GatherFlat { .. } => "gather_flat",
            Op::GaussianBlur3 => "gaussian_blur3",
        }
    }
}

/// How the backward rule of ReLU treats the incoming gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReluBackward {
    Standard,
    /// Additionally zeroes negative incoming gradients (guided backprop).
    Guided,
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// Saved selection indices for max pool / max / min reductions.
    arg: Option<Rc<Vec<usize>>>,
}

struct GraphInner {
    nodes: Vec<Node>,
    relu_backward: ReluBackward,
}

/// A computation graph. Cloning the handle shares the same tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor bound into a graph (or a free constant when `node` is absent).
#[derive(Clone)]
pub struct DiffValue {
    binding: Option<(Graph, usize)>,
    value: Tensor,
    requires_grad: bool,
}

impl DiffValue {
    /// A constant leaf that lives outside any graph.
    pub fn constant(value: Tensor) -> DiffValue {
        DiffValue {
            binding: None,
            value,
            requires_grad: false,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_bound(&self) -> bool {
        self.binding.is_some()
    }

    pub fn node_index(&self) -> Option<usize> {
        self.binding.as_ref().map(|(_, i)| *i)
    }

    /// A free constant carrying this value (cuts the graph connection).
    pub fn detach(&self) -> DiffValue {
        DiffValue::constant(self.value.clone())
    }
}

/// Gradient of one `wrt` entry. `reachable` is false when the entry does not
/// influence the differentiated output (the gradient is then zeros).
pub struct GradEntry {
    pub grad: DiffValue,
    pub reachable: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                relu_backward: ReluBackward::Standard,
            })),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn relu_backward_mode(&self) -> ReluBackward {
        self.inner.borrow().relu_backward
    }

    pub fn set_relu_backward(&self, mode: ReluBackward) {
        self.inner.borrow_mut().relu_backward = mode;
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// New differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> DiffValue {
        self.push_leaf(value, Op::Leaf, true)
    }

    /// New non-differentiable input node.
    pub fn input(&self, value: Tensor, requires_grad: bool) -> DiffValue {
        self.push_leaf(value, Op::Leaf, requires_grad)
    }

    /// In-graph constant.
    pub fn constant(&self, value: Tensor) -> DiffValue {
        self.push_leaf(value, Op::Constant, false)
    }

    pub fn scalar(&self, v: f64) -> DiffValue {
        self.constant(Tensor::scalar(v))
    }

    fn push_leaf(&self, value: Tensor, op: Op, requires_grad: bool) -> DiffValue {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            parents: Vec::new(),
            value: value.clone(),
            requires_grad,
            arg: None,
        });
        DiffValue {
            binding: Some((self.clone(), idx)),
            value,
            requires_grad,
        }
    }

    /// DiffValue view of an existing node.
    fn node_value(&self, idx: usize) -> DiffValue {
        let inner = self.inner.borrow();
        let n = &inner.nodes[idx];
        DiffValue {
            binding: Some((self.clone(), idx)),
            value: n.value.clone(),
            requires_grad: n.requires_grad,
        }
    }

    /// Node index of `dv` in this graph, interning free constants.
    fn adopt(&self, dv: &DiffValue) -> Result<usize> {
        match &dv.binding {
            Some((g, idx)) => {
                if !self.same_graph(g) {
                    return Err(SibError::contract(
                        "apply_primitive",
                        "inputs belong to different graphs",
                    ));
                }
                Ok(*idx)
            }
            None => {
                let interned = self.constant(dv.value.clone());
                Ok(interned.node_index().expect("just created"))
            }
        }
    }

    /// Applies one primitive, validating shapes, computing the forward value,
    /// and registering the node so its backward rule is available.
    pub fn apply_primitive(&self, op: Op, inputs: &[&DiffValue]) -> Result<DiffValue> {
        let (value, arg) = self.forward(&op, inputs)?;
        let parents: Vec<usize> = inputs
            .iter()
            .map(|dv| self.adopt(dv))
            .collect::<Result<_>>()?;
        let requires_grad = inputs.iter().any(|dv| dv.requires_grad);
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            parents,
            value: value.clone(),
            requires_grad,
            arg,
        });
        Ok(DiffValue {
            binding: Some((self.clone(), idx)),
            value,
            requires_grad,
        })
    }

    fn forward(&self, op: &Op, inputs: &[&DiffValue]) -> Result<(Tensor, Option<Rc<Vec<usize>>>)> {
        use kernels as k;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(SibError::contract(
                    "apply_primitive",
                    format!("{} expects {n} inputs, got {}", op.name(), inputs.len()),
                ))
            } else {
                Ok(())
            }
        };
        let t = |i: usize| inputs[i].value();
        let out = match op {
            Op::Leaf | Op::Constant => {
                return Err(SibError::contract(
                    "apply_primitive",
                    "leaf/constant nodes are created via Graph::leaf / Graph::constant",
                ))
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                arity(2)?;
                broadcast_shapes(op.name(), t(0).shape(), t(1).shape())?;
                let f = match op {
                    Op::Add => |a: f64, b: f64| a + b,
                    Op::Sub => |a: f64, b: f64| a - b,
                    Op::Mul => |a: f64, b: f64| a * b,
                    _ => |a: f64, b: f64| a / b,
                };
                k::binary_broadcast(t(0), t(1), f)
            }
            Op::Neg => {
                arity(1)?;
                t(0).map(|v| -v)
            }
            Op::Relu => {
                arity(1)?;
                t(0).map(|v| if v > 0.0 { v } else { 0.0 })
            }
            Op::Sigmoid => {
                arity(1)?;
                t(0).map(|v| 1.0 / (1.0 + (-v).exp()))
            }
            Op::Exp => {
                arity(1)?;
                t(0).map(f64::exp)
            }
            Op::Log => {
                arity(1)?;
                t(0).map(f64::ln)
            }
            Op::Abs => {
                arity(1)?;
                t(0).map(f64::abs)
            }
            Op::Sqrt => {
                arity(1)?;
                t(0).map(f64::sqrt)
            }
            Op::Matmul => {
                arity(2)?;
                let (a, b) = (t(0).shape(), t(1).shape());
                if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                    return Err(SibError::shape(
                        "matmul",
                        format!("incompatible operands {a:?} x {b:?}"),
                    ));
                }
                k::matmul(t(0), t(1))
            }
            Op::Transpose => {
                arity(1)?;
                if t(0).rank() != 2 {
                    return Err(SibError::shape(
                        "transpose",
                        format!("expected rank 2, got {:?}", t(0).shape()),
                    ));
                }
                k::transpose2d(t(0))
            }
            Op::Reshape { shape } => {
                arity(1)?;
                t(0).reshape(shape)?
            }
            Op::BroadcastTo { shape } => {
                arity(1)?;
                t(0).broadcast_to(shape)?
            }
            Op::SumAxes { axes, keepdims } => {
                arity(1)?;
                check_axes("sum", axes, t(0).rank())?;
                k::sum_axes(t(0), axes, *keepdims)
            }
            Op::MeanAxes { axes, keepdims } => {
                arity(1)?;
                check_axes("mean", axes, t(0).rank())?;
                k::mean_axes(t(0), axes, *keepdims)
            }
            Op::MaxAxes { axes, keepdims } | Op::MinAxes { axes, keepdims } => {
                arity(1)?;
                check_axes(op.name(), axes, t(0).rank())?;
                let take_max = matches!(op, Op::MaxAxes { .. });
                let (v, arg) = k::extremum_axes(t(0), axes, *keepdims, take_max);
                return Ok((v, Some(Rc::new(arg))));
            }
            Op::Softmax { tau } => {
                arity(1)?;
                if *tau <= 0.0 {
                    return Err(SibError::domain(
                        "softmax",
                        format!("temperature must be positive, got {tau}"),
                    ));
                }
                if t(0).rank() == 0 {
                    return Err(SibError::shape("softmax", "rank-0 input".to_string()));
                }
                k::softmax_last(t(0), *tau)
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(SibError::contract("concat", "needs at least one input"));
                }
                let first = t(0).shape();
                if *axis >= first.len() {
                    return Err(SibError::shape(
                        "concat",
                        format!("axis {axis} out of range for {first:?}"),
                    ));
                }
                for dv in inputs.iter().skip(1) {
                    let s = dv.value().shape();
                    let ok = s.len() == first.len()
                        && s.iter()
                            .zip(first.iter())
                            .enumerate()
                            .all(|(i, (a, b))| i == *axis || a == b);
                    if !ok {
                        return Err(SibError::shape(
                            "concat",
                            format!("mismatched part shapes {first:?} vs {s:?} along axis {axis}"),
                        ));
                    }
                }
                let parts: Vec<&Tensor> = inputs.iter().map(|dv| dv.value()).collect();
                k::concat(&parts, *axis)
            }
            Op::Slice { axis, start, len } => {
                arity(1)?;
                let s = t(0).shape();
                if *axis >= s.len() || start + len > s[*axis] || *len == 0 {
                    return Err(SibError::shape(
                        "slice",
                        format!("slice [{start}, {start}+{len}) on axis {axis} of {s:?}"),
                    ));
                }
                k::slice_axis(t(0), *axis, *start, *len)
            }
            Op::Conv2d { stride, pad } => {
                arity(2)?;
                let (x, w) = (t(0).shape(), t(1).shape());
                if x.len() != 4 || w.len() != 4 {
                    return Err(SibError::shape(
                        "conv2d",
                        format!("expected rank-4 input/kernel, got {x:?} and {w:?}"),
                    ));
                }
                if x[1] != w[1] {
                    return Err(SibError::shape(
                        "conv2d",
                        format!("input channels {} != kernel channels {}", x[1], w[1]),
                    ));
                }
                if *stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
                    return Err(SibError::shape(
                        "conv2d",
                        format!("kernel {w:?} does not fit input {x:?} with pad {pad}"),
                    ));
                }
                k::conv2d(t(0), t(1), *stride, *pad)
            }
            Op::Conv2dGradInput { stride, pad, hw } => {
                arity(2)?;
                k::conv2d_grad_input(t(0), t(1), *stride, *pad, *hw)
            }
            Op::Conv2dGradWeight { stride, pad, khw } => {
                arity(2)?;
                k::conv2d_grad_weight(t(0), t(1), *stride, *pad, *khw)
            }
            Op::AvgPool2d { k: ks, stride } | Op::MaxPool2d { k: ks, stride } => {
                arity(1)?;
                let s = t(0).shape();
                if s.len() != 4 || *ks == 0 || *stride == 0 || s[2] < *ks || s[3] < *ks {
                    return Err(SibError::shape(
                        op.name(),
                        format!("window {ks} stride {stride} on {s:?}"),
                    ));
                }
                if matches!(op, Op::MaxPool2d { .. }) {
                    let (v, arg) = k::max_pool2d(t(0), *ks, *stride);
                    return Ok((v, Some(Rc::new(arg))));
                }
                k::avg_pool2d(t(0), *ks, *stride)
            }
            Op::AvgPool2dGrad { k: ks, stride, hw } => {
                arity(1)?;
                k::avg_pool2d_grad(t(0), *ks, *stride, *hw)
            }
            Op::ScatterFlat { indices, shape } => {
                arity(1)?;
                if indices.len() != t(0).numel() {
                    return Err(SibError::shape(
                        "scatter_flat",
                        format!("{} indices for {} elements", indices.len(), t(0).numel()),
                    ));
                }
                k::scatter_flat(t(0), indices, shape)
            }
            Op::GatherFlat { indices, shape } => {
                arity(1)?;
                k::gather_flat(t(0), indices, shape)
            }
            Op::GaussianBlur3 => {
                arity(1)?;
                if t(0).rank() < 2 {
                    return Err(SibError::shape(
                        "gaussian_blur3",
                        format!("needs rank >= 2, got {:?}", t(0).shape()),
                    ));
                }
                k::gaussian_blur3(t(0))
            }
        };
        Ok((out, None))
    }

    // -- convenience wrappers ------------------------------------------------

    pub fn add(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Add, &[a, b])
    }
    pub fn sub(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Sub, &[a, b])
    }
    pub fn mul(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Mul, &[a, b])
    }
    pub fn div(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Div, &[a, b])
    }
    pub fn neg(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Neg, &[a])
    }
    pub fn relu(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Relu, &[a])
    }
    pub fn sigmoid(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Sigmoid, &[a])
    }
    pub fn exp(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Exp, &[a])
    }
    pub fn log(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Log, &[a])
    }
    pub fn abs(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Abs, &[a])
    }
    pub fn sqrt(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Sqrt, &[a])
    }
    pub fn matmul(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Matmul, &[a, b])
    }
    pub fn transpose(&self, a: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::Transpose, &[a])
    }
    pub fn reshape(&self, a: &DiffValue, shape: &[usize]) -> Result<DiffValue> {
        self.apply_primitive(Op::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn broadcast_to(&self, a: &DiffValue, shape: &[usize]) -> Result<DiffValue> {
        self.apply_primitive(Op::BroadcastTo { shape: shape.to_vec() }, &[a])
    }
    pub fn sum(&self, a: &DiffValue, axes: &[usize], keepdims: bool) -> Result<DiffValue> {
        self.apply_primitive(Op::SumAxes { axes: normalize_axes(axes), keepdims }, &[a])
    }
    pub fn sum_all(&self, a: &DiffValue) -> Result<DiffValue> {
        let axes: Vec<usize> = (0..a.value().rank()).collect();
        if axes.is_empty() {
            return self.reshape(a, &[]);
        }
        self.sum(a, &axes, false)
    }
    pub fn mean(&self, a: &DiffValue, axes: &[usize], keepdims: bool) -> Result<DiffValue> {
        self.apply_primitive(Op::MeanAxes { axes: normalize_axes(axes), keepdims }, &[a])
    }
    pub fn mean_all(&self, a: &DiffValue) -> Result<DiffValue> {
        let axes: Vec<usize> = (0..a.value().rank()).collect();
        if axes.is_empty() {
            return self.reshape(a, &[]);
        }
        self.mean(a, &axes, false)
    }
    pub fn max(&self, a: &DiffValue, axes: &[usize], keepdims: bool) -> Result<DiffValue> {
        self.apply_primitive(Op::MaxAxes { axes: normalize_axes(axes), keepdims }, &[a])
    }
    pub fn min(&self, a: &DiffValue, axes: &[usize], keepdims: bool) -> Result<DiffValue> {
        self.apply_primitive(Op::MinAxes { axes: normalize_axes(axes), keepdims }, &[a])
    }
    pub fn softmax(&self, a: &DiffValue, tau: f64) -> Result<DiffValue> {
        self.apply_primitive(Op::Softmax { tau }, &[a])
    }
    pub fn concat(&self, parts: &[&DiffValue], axis: usize) -> Result<DiffValue> {
        self.apply_primitive(Op::Concat { axis }, parts)
    }
    pub fn slice(&self, a: &DiffValue, axis: usize, start: usize, len: usize) -> Result<DiffValue> {
        self.apply_primitive(Op::Slice { axis, start, len }, &[a])
    }
    pub fn conv2d(&self, x: &DiffValue, w: &DiffValue, stride: usize, pad: usize) -> Result<DiffValue> {
        self.apply_primitive(Op::Conv2d { stride, pad }, &[x, w])
    }
    pub fn avg_pool2d(&self, x: &DiffValue, k: usize, stride: usize) -> Result<DiffValue> {
        self.apply_primitive(Op::AvgPool2d { k, stride }, &[x])
    }
    pub fn max_pool2d(&self, x: &DiffValue, k: usize, stride: usize) -> Result<DiffValue> {
        self.apply_primitive(Op::MaxPool2d { k, stride }, &[x])
    }
    pub fn gaussian_blur3(&self, x: &DiffValue) -> Result<DiffValue> {
        self.apply_primitive(Op::GaussianBlur3, &[x])
    }

    /// `a * k` for a plain scalar.
    pub fn scale(&self, a: &DiffValue, k: f64) -> Result<DiffValue> {
        let s = self.scalar(k);
        self.mul(a, &s)
    }

    /// Reduces `g` (by summing) down to `target` under broadcasting rules.
    pub fn sum_to(&self, g: &DiffValue, target: &[usize]) -> Result<DiffValue> {
        let gshape = g.value().shape().to_vec();
        if gshape == target {
            return Ok(g.clone());
        }
        let offset = gshape.len() - target.len();
        let mut axes = Vec::new();
        for i in 0..gshape.len() {
            if i < offset {
                axes.push(i);
            } else if target[i - offset] == 1 && gshape[i] != 1 {
                axes.push(i);
            }
        }
        let summed = if axes.is_empty() { g.clone() } else { self.sum(g, &axes, true)? };
        self.reshape(&summed, target)
    }

    // -- backward ------------------------------------------------------------

    /// Gradients of a scalar `output` with respect to each `wrt` entry.
    ///
    /// With `retain_graph` the returned gradients stay bound to this graph
    /// and can be differentiated again; otherwise they are detached
    /// constants.
    pub fn backward(
        &self,
        output: &DiffValue,
        wrt: &[&DiffValue],
        retain_graph: bool,
    ) -> Result<Vec<GradEntry>> {
        if output.value().numel() != 1 {
            return Err(SibError::contract(
                "backward",
                format!("output must be scalar, got shape {:?}", output.shape()),
            ));
        }
        let seed = self.constant(Tensor::ones(output.shape()));
        self.propagate(output, wrt, seed, retain_graph)
    }

    /// Vector-Jacobian product: gradients of `<outputs, cotangent>` with the
    /// cotangent held constant.
    pub fn vjp(
        &self,
        outputs: &DiffValue,
        wrt: &[&DiffValue],
        cotangent: &Tensor,
        retain_graph: bool,
    ) -> Result<Vec<GradEntry>> {
        if cotangent.shape() != outputs.shape() {
            return Err(SibError::contract(
                "vjp",
                format!(
                    "cotangent shape {:?} != outputs shape {:?}",
                    cotangent.shape(),
                    outputs.shape()
                ),
            ));
        }
        let seed = self.constant(cotangent.clone());
        self.propagate(outputs, wrt, seed, retain_graph)
    }

    fn propagate(
        &self,
        output: &DiffValue,
        wrt: &[&DiffValue],
        seed: DiffValue,
        retain_graph: bool,
    ) -> Result<Vec<GradEntry>> {
        let out_idx = match &output.binding {
            Some((g, idx)) if self.same_graph(g) => *idx,
            Some(_) => {
                return Err(SibError::contract("backward", "output bound to another graph"))
            }
            None => return Err(SibError::contract("backward", "output is a free constant")),
        };
        let mut wrt_idx = Vec::with_capacity(wrt.len());
        for dv in wrt {
            if !dv.requires_grad {
                return Err(SibError::contract(
                    "backward",
                    "wrt entry does not require gradients",
                ));
            }
            match &dv.binding {
                Some((g, idx)) if self.same_graph(g) => wrt_idx.push(*idx),
                _ => {
                    return Err(SibError::contract(
                        "backward",
                        "wrt entry is not bound to this graph",
                    ))
                }
            }
        }

        let mut grads: Vec<Option<DiffValue>> = vec![None; out_idx + 1];
        grads[out_idx] = Some(seed);

        for idx in (0..=out_idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let (op, parents, arg, node_requires) = {
                let inner = self.inner.borrow();
                let n = &inner.nodes[idx];
                (n.op.clone(), n.parents.clone(), n.arg.clone(), n.requires_grad)
            };
            if wrt_idx.contains(&idx) {
                grads[idx] = Some(g.clone());
            }
            if parents.is_empty() || !node_requires {
                continue;
            }
            let contributions = self.op_backward(&op, idx, &parents, arg.as_deref(), &g)?;
            for (p, contrib) in parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                let parent_requires = self.inner.borrow().nodes[*p].requires_grad;
                if !parent_requires {
                    continue;
                }
                grads[*p] = Some(match grads[*p].take() {
                    Some(prev) => self.add(&prev, &c)?,
                    None => c,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &wi in &wrt_idx {
            let entry = match grads.get(wi).and_then(|g| g.clone()) {
                Some(g) => GradEntry {
                    grad: if retain_graph { g } else { g.detach() },
                    reachable: true,
                },
                None => {
                    let shape = self.inner.borrow().nodes[wi].value.shape().to_vec();
                    GradEntry {
                        grad: DiffValue::constant(Tensor::zeros(&shape)),
                        reachable: false,
                    }
                }
            };
            out.push(entry);
        }
        Ok(out)
    }

    /// Per-parent gradient contributions of node `idx`, emitted as primitives
    /// so the result is itself differentiable.
    fn op_backward(
        &self,
        op: &Op,
        idx: usize,
        parents: &[usize],
        arg: Option<&Vec<usize>>,
        g: &DiffValue,
    ) -> Result<Vec<Option<DiffValue>>> {
        let y = || self.node_value(idx);
        let p = |i: usize| self.node_value(parents[i]);
        let pshape = |i: usize| -> Vec<usize> {
            self.inner.borrow().nodes[parents[i]].value.shape().to_vec()
        };
        let saved = || -> Rc<Vec<usize>> {
            Rc::new(arg.expect("selection op saves indices").clone())
        };
        let out = match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add => vec![
                Some(self.sum_to(g, &pshape(0))?),
                Some(self.sum_to(g, &pshape(1))?),
            ],
            Op::Sub => {
                let ng = self.neg(g)?;
                vec![
                    Some(self.sum_to(g, &pshape(0))?),
                    Some(self.sum_to(&ng, &pshape(1))?),
                ]
            }
            Op::Mul => {
                let ga = self.mul(g, &p(1))?;
                let gb = self.mul(g, &p(0))?;
                vec![
                    Some(self.sum_to(&ga, &pshape(0))?),
                    Some(self.sum_to(&gb, &pshape(1))?),
                ]
            }
            Op::Div => {
                // y = a / b: da = g / b, db = -g * y / b
                let ga = self.div(g, &p(1))?;
                let gy = self.mul(g, &y())?;
                let gb = self.neg(&self.div(&gy, &p(1))?)?;
                vec![
                    Some(self.sum_to(&ga, &pshape(0))?),
                    Some(self.sum_to(&gb, &pshape(1))?),
                ]
            }
            Op::Neg => vec![Some(self.neg(g)?)],
            Op::Relu => {
                let mask = self.constant(p(0).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                let upstream = match self.relu_backward_mode() {
                    ReluBackward::Standard => g.clone(),
                    ReluBackward::Guided => self.relu(g)?,
                };
                vec![Some(self.mul(&upstream, &mask)?)]
            }
            Op::Sigmoid => {
                let one = self.constant(Tensor::ones(y().shape()));
                let one_minus = self.sub(&one, &y())?;
                let d = self.mul(&y(), &one_minus)?;
                vec![Some(self.mul(g, &d)?)]
            }
            Op::Exp => vec![Some(self.mul(g, &y())?)],
            Op::Log => vec![Some(self.div(g, &p(0))?)],
            Op::Abs => {
                let sign = self.constant(p(0).value().map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                vec![Some(self.mul(g, &sign)?)]
            }
            Op::Sqrt => {
                // d sqrt(a) = g / (2 sqrt(a))
                let gy = self.scale(g, 0.5)?;
                vec![Some(self.div(&gy, &y())?)]
            }
            Op::Matmul => {
                let ga = self.matmul(g, &self.transpose(&p(1))?)?;
                let gb = self.matmul(&self.transpose(&p(0))?, g)?;
                vec![Some(ga), Some(gb)]
            }
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::Reshape { .. } => vec![Some(self.reshape(g, &pshape(0))?)],
            Op::BroadcastTo { .. } => vec![Some(self.sum_to(g, &pshape(0))?)],
            Op::SumAxes { axes, keepdims } => {
                vec![Some(self.unreduce(g, axes, *keepdims, &pshape(0))?)]
            }
            Op::MeanAxes { axes, keepdims } => {
                let count: usize = axes.iter().map(|&a| pshape(0)[a]).product();
                let spread = self.unreduce(g, axes, *keepdims, &pshape(0))?;
                vec![Some(self.scale(&spread, 1.0 / count as f64)?)]
            }
            Op::MaxAxes { .. } | Op::MinAxes { .. } | Op::MaxPool2d { .. } => {
                let op = Op::ScatterFlat {
                    indices: saved(),
                    shape: pshape(0),
                };
                vec![Some(self.apply_primitive(op, &[g])?)]
            }
            Op::Softmax { tau } => {
                // dx = (s * (g - sum(g * s, last, keep))) / tau
                let s = y();
                let gs = self.mul(g, &s)?;
                let last = s.value().rank() - 1;
                let dot = self.sum(&gs, &[last], true)?;
                let centered = self.sub(g, &dot)?;
                let dx = self.mul(&s, &centered)?;
                vec![Some(self.scale(&dx, 1.0 / tau)?)]
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parents.len());
                for i in 0..parents.len() {
                    let len = pshape(i)[*axis];
                    grads.push(Some(self.slice(g, *axis, offset, len)?));
                    offset += len;
                }
                grads
            }
            Op::Slice { axis, start, len } => {
                // Zero-pad g back to the parent extent along `axis`.
                let full = pshape(0);
                let before = *start;
                let after = full[*axis] - start - len;
                let mut parts: Vec<DiffValue> = Vec::new();
                if before > 0 {
                    let mut s = full.clone();
                    s[*axis] = before;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                parts.push(g.clone());
                if after > 0 {
                    let mut s = full.clone();
                    s[*axis] = after;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                if parts.len() == 1 {
                    vec![Some(g.clone())]
                } else {
                    let refs: Vec<&DiffValue> = parts.iter().collect();
                    vec![Some(self.concat(&refs, *axis)?)]
                }
            }
            Op::Conv2d { stride, pad } => {
                let xs = pshape(0);
                let ws = pshape(1);
                let gx = self.apply_primitive(
                    Op::Conv2dGradInput { stride: *stride, pad: *pad, hw: (xs[2], xs[3]) },
                    &[g, &p(1)],
                )?;
                let gw = self.apply_primitive(
                    Op::Conv2dGradWeight { stride: *stride, pad: *pad, khw: (ws[2], ws[3]) },
                    &[&p(0), g],
                )?;
                vec![Some(gx), Some(gw)]
            }
            Op::Conv2dGradInput { stride, pad, .. } => {
                // y = A_w^T gy (linear in gy and w).
                let ws = pshape(1);
                let g_gy = self.apply_primitive(Op::Conv2d { stride: *stride, pad: *pad }, &[g, &p(1)])?;
                let g_w = self.apply_primitive(
                    Op::Conv2dGradWeight { stride: *stride, pad: *pad, khw: (ws[2], ws[3]) },
                    &[g, &p(0)],
                )?;
                vec![Some(g_gy), Some(g_w)]
            }
            Op::Conv2dGradWeight { stride, pad, .. } => {
                // y = x (*) gy accumulated into kernel coordinates.
                let xs = pshape(0);
                let g_x = self.apply_primitive(
                    Op::Conv2dGradInput { stride: *stride, pad: *pad, hw: (xs[2], xs[3]) },
                    &[&p(1), g],
                )?;
                let g_gy = self.apply_primitive(Op::Conv2d { stride: *stride, pad: *pad }, &[&p(0), g])?;
                vec![Some(g_x), Some(g_gy)]
            }
            Op::AvgPool2d { k, stride } => {
                let xs = pshape(0);
                let gx = self.apply_primitive(
                    Op::AvgPool2dGrad { k: *k, stride: *stride, hw: (xs[2], xs[3]) },
                    &[g],
                )?;
                vec![Some(gx)]
            }
            Op::AvgPool2dGrad { k, stride, .. } => {
                vec![Some(self.avg_pool2d(g, *k, *stride)?)]
            }
            Op::ScatterFlat { indices, .. } => {
                let op = Op::GatherFlat {
                    indices: Rc::clone(indices),
                    shape: pshape(0),
                };
                vec![Some(self.apply_primitive(op, &[g])?)]
            }
            Op::GatherFlat { indices, .. } => {
                let op = Op::ScatterFlat {
                    indices: Rc::clone(indices),
                    shape: pshape(0),
                };
                vec![Some(self.apply_primitive(op, &[g])?)]
            }
            Op::GaussianBlur3 => vec![Some(self.gaussian_blur3(g)?)],
        };
        Ok(out)
    }

    /// Inverse of a reduction for gradient flow: reshape to the keepdims
    /// form, then broadcast to the original shape.
    fn unreduce(
        &self,
        g: &DiffValue,
        axes: &[usize],
        keepdims: bool,
        target: &[usize],
    ) -> Result<DiffValue> {
        let kept = if keepdims {
            g.clone()
        } else {
            let mut shape = target.to_vec();
            for &a in axes {
                shape[a] = 1;
            }
            self.reshape(g, &shape)?
        };
        self.broadcast_to(&kept, target)
    }
}

fn normalize_axes(axes: &[usize]) -> Vec<usize> {
    let mut a = axes.to_vec();
    a.sort_unstable();
    a.dedup();
    a
}

fn check_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    if axes.is_empty() {
        return Err(SibError::contract(op, "empty axis list"));
    }
    if axes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SibError::contract(op, format!("axes must be sorted unique, got {axes:?}")));
    }
    if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
        return Err(SibError::shape(op, format!("axis {bad} out of range for rank {rank}")));
    }
    Ok(())
}
