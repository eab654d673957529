//! Tape-style computation graph with reverse-mode accumulation.
//!
//! Nodes are appended in creation order, which is always a topological
//! order, so `backward` is a single reverse sweep over the reachable set.
//!
//! Binary elementwise ops broadcast with trailing-dimension alignment:
//! shapes are right-aligned and every pair of extents must be equal or one
//! of them must be 1. Missing leading dimensions count as 1. Anything else
//! needs an explicit `reshape`.

use std::borrow::Cow;

use super::GradError;
use crate::scalar::Scalar;

pub type Shape = Vec<usize>;

/// Handle to a node of one [`Graph`]. Shape, payload and gradient live in
/// the graph and are read through [`Graph::shape`], [`Graph::data`] and
/// [`Graph::grad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(u32);

impl Value {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op<S> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sum,
    Mean,
    SumAxis(usize),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
    Sqrt,
    Square,
    Neg,
    Scale(S),
    Offset(S),
    Slice { axis: usize, start: usize, len: usize },
    Concat(usize),
    Reshape,
    Broadcast,
    Permute(Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    Conv2d { stride: usize, pad: usize },
}

impl<S> Op<S> {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum-axis",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Reshape => "reshape",
            Op::Broadcast => "broadcast",
            Op::Permute(_) => "permute",
            Op::Softmax(_) => "softmax-over-axis",
            Op::LogSoftmax(_) => "log-softmax-over-axis",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

/// Attributes for the string-tagged entry point [`Graph::apply_primitive`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub shape: Option<Shape>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub perm: Option<Vec<usize>>,
    pub scalar: Option<f64>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
}

struct Node<S> {
    shape: Shape,
    data: Vec<S>,
    grad: Vec<S>,
    op: Op<S>,
    inputs: Vec<Value>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Result shape of trailing-aligned broadcasting, or `None` if incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Shape> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `src` viewed inside `out`, zero along broadcast axes.
fn aligned_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let off = rank - src.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + off] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Visits every output index with the matching offsets into two inputs.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k > padded || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output positions `o` in `0..out` whose input `o*stride + k - pad` lies in `0..len`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // need o*stride + k - pad <= len - 1
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.id()].shape
    }

    pub fn data(&self, v: Value) -> &[S] {
        &self.nodes[v.id()].data
    }

    /// Accumulated gradient; zeros until a backward pass reaches the node.
    pub fn grad(&self, v: Value) -> Cow<'_, [S]> {
        let node = &self.nodes[v.id()];
        if node.grad.len() == node.data.len() {
            Cow::Borrowed(&node.grad)
        } else {
            Cow::Owned(vec![S::zero(); node.data.len()])
        }
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.id()].requires_grad
    }

    pub fn op(&self, v: Value) -> &Op<S> {
        &self.nodes[v.id()].op
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Value) -> S {
        let d = self.data(v);
        debug_assert_eq!(d.len(), 1, "scalar() on shape {:?}", self.shape(v));
        d[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    fn push(&mut self, shape: Shape, data: Vec<S>, op: Op<S>, inputs: Vec<Value>) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|i| self.nodes[i.id()].requires_grad);
        let id = self.nodes.len();
        assert!(id < u32::MAX as usize, "graph exceeds u32 node ids");
        self.nodes.push(Node { shape, data, grad: Vec::new(), op, inputs, requires_grad });
        Value(id as u32)
    }

    fn leaf(&mut self, shape: Shape, data: Vec<S>, requires_grad: bool) -> Result<Value, GradError> {
        if numel(&shape) != data.len() {
            return Err(GradError::ShapeMismatch { op: "leaf", shapes: vec![shape, vec![data.len()]] });
        }
        let id = self.nodes.len();
        let grad = if requires_grad { vec![S::zero(); data.len()] } else { Vec::new() };
        self.nodes.push(Node { shape, data, grad, op: Op::Leaf, inputs: Vec::new(), requires_grad });
        Ok(Value(id as u32))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Value, GradError> {
        self.leaf(shape.to_vec(), data, false)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, shape: &[usize], data: Vec<S>) -> Result<Value, GradError> {
        self.leaf(shape.to_vec(), data, true)
    }

    pub fn scalar_const(&mut self, x: S) -> Value {
        self.push(Vec::new(), vec![x], Op::Leaf, Vec::new())
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Value {
        self.push(shape.to_vec(), vec![S::zero(); numel(shape)], Op::Leaf, Vec::new())
    }

    pub fn full(&mut self, shape: &[usize], x: S) -> Value {
        self.push(shape.to_vec(), vec![x; numel(shape)], Op::Leaf, Vec::new())
    }

    // ---- string-tagged entry point -------------------------------------

    /// Applies a primitive by tag. Typed methods (`add`, `matmul`, ...) are
    /// the usual route; this form exists for table-driven callers.
    pub fn apply_primitive(&mut self, tag: &str, inputs: &[Value], attrs: &Attrs) -> Result<Value, GradError> {
        let arity = |n: usize| -> Result<(), GradError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(GradError::Arity { op: tag.to_string(), expected: n, got: inputs.len() })
            }
        };
        let need = |x: Option<usize>, what: &str| {
            x.ok_or_else(|| GradError::BadAttr { op: tag.to_string(), reason: format!("missing `{what}`") })
        };
        match tag {
            "add" | "sub" | "mul" | "div" | "matmul" => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match tag {
                    "add" => self.add(a, b),
                    "sub" => self.sub(a, b),
                    "mul" => self.mul(a, b),
                    "div" => self.div(a, b),
                    _ => self.matmul(a, b),
                }
            }
            "sum" | "mean" | "exp" | "log" | "tanh" | "sigmoid" | "softplus" | "relu" | "abs" | "sqrt"
            | "square" | "neg" => {
                arity(1)?;
                let x = inputs[0];
                Ok(match tag {
                    "sum" => match attrs.axis {
                        Some(axis) => return self.sum_axis(x, axis),
                        None => self.sum(x),
                    },
                    "mean" => self.mean(x),
                    "exp" => self.exp(x),
                    "log" => self.log(x),
                    "tanh" => self.tanh(x),
                    "sigmoid" => self.sigmoid(x),
                    "softplus" => self.softplus(x),
                    "relu" => self.relu(x),
                    "abs" => self.abs(x),
                    "sqrt" => self.sqrt(x),
                    "square" => self.square(x),
                    _ => self.neg(x),
                })
            }
            "scale" | "offset" => {
                arity(1)?;
                let c = attrs
                    .scalar
                    .ok_or_else(|| GradError::BadAttr { op: tag.to_string(), reason: "missing `scalar`".into() })?;
                Ok(if tag == "scale" { self.scale(inputs[0], S::lit(c)) } else { self.offset(inputs[0], S::lit(c)) })
            }
            "slice" => {
                arity(1)?;
                self.slice(inputs[0], need(attrs.axis, "axis")?, need(attrs.start, "start")?, need(attrs.len, "len")?)
            }
            "concat" => self.concat(inputs, need(attrs.axis, "axis")?),
            "reshape" | "broadcast" => {
                arity(1)?;
                let shape = attrs
                    .shape
                    .clone()
                    .ok_or_else(|| GradError::BadAttr { op: tag.to_string(), reason: "missing `shape`".into() })?;
                if tag == "reshape" {
                    self.reshape(inputs[0], &shape)
                } else {
                    self.broadcast(inputs[0], &shape)
                }
            }
            "permute" => {
                arity(1)?;
                let perm = attrs
                    .perm
                    .clone()
                    .ok_or_else(|| GradError::BadAttr { op: tag.to_string(), reason: "missing `perm`".into() })?;
                self.permute(inputs[0], &perm)
            }
            "softmax-over-axis" | "log-softmax-over-axis" => {
                arity(1)?;
                let axis = need(attrs.axis, "axis")?;
                if tag == "softmax-over-axis" {
                    self.softmax(inputs[0], axis)
                } else {
                    self.log_softmax(inputs[0], axis)
                }
            }
            "conv2d" => {
                arity(3)?;
                self.conv2d(inputs[0], inputs[1], inputs[2], attrs.stride.unwrap_or(1), attrs.pad.unwrap_or(0))
            }
            other => Err(GradError::UnknownOp(other.to_string())),
        }
    }

    // ---- elementwise binary -------------------------------------------

    fn binary(&mut self, op: Op<S>, a: Value, b: Value, f: impl Fn(S, S) -> S) -> Result<Value, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shapes(&sa, &sb)
            .ok_or_else(|| GradError::ShapeMismatch { op: op.tag(), shapes: vec![sa.clone(), sb.clone()] })?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<S> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 && out == sa {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else if da.len() == 1 && out == sb {
            let x = da[0];
            db.iter().map(|&y| f(x, y)).collect()
        } else {
            let mut data = vec![S::zero(); numel(&out)];
            let (ta, tb) = (aligned_strides(&sa, &out), aligned_strides(&sb, &out));
            for_each_broadcast(&out, &ta, &tb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            data
        };
        Ok(self.push(out, data, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, GradError> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, GradError> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, GradError> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value, GradError> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    // ---- elementwise unary --------------------------------------------

    fn unary(&mut self, op: Op<S>, x: Value, f: impl Fn(S) -> S) -> Value {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(shape, data, op, vec![x])
    }

    pub fn exp(&mut self, x: Value) -> Value {
        self.unary(Op::Exp, x, S::exp)
    }

    pub fn log(&mut self, x: Value) -> Value {
        self.unary(Op::Log, x, S::ln)
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        self.unary(Op::Tanh, x, S::tanh)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn softplus(&mut self, x: Value) -> Value {
        self.unary(Op::Softplus, x, softplus)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(Op::Relu, x, |v| v.max(S::zero()))
    }

    pub fn abs(&mut self, x: Value) -> Value {
        self.unary(Op::Abs, x, S::abs)
    }

    pub fn sqrt(&mut self, x: Value) -> Value {
        self.unary(Op::Sqrt, x, S::sqrt)
    }

    pub fn square(&mut self, x: Value) -> Value {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn neg(&mut self, x: Value) -> Value {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn scale(&mut self, x: Value, c: S) -> Value {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    pub fn offset(&mut self, x: Value, c: S) -> Value {
        self.unary(Op::Offset(c), x, |v| v + c)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Value) -> Value {
        let s = self.data(x).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: Value) -> Value {
        let d = self.data(x);
        let s: S = d.iter().copied().sum::<S>() / S::lit(d.len().max(1) as f64);
        self.push(Vec::new(), vec![s], Op::Mean, vec![x])
    }

    pub fn sum_axis(&mut self, x: Value, axis: usize) -> Result<Value, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GradError::BadAttr { op: "sum-axis".into(), reason: format!("axis {axis} of {shape:?}") });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::SumAxis(axis), vec![x]))
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || GradError::ShapeMismatch { op: "matmul", shapes: vec![sa.clone(), sb.clone()] };
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(bad());
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                if n == 1 {
                    row[0] += av * db[p];
                } else {
                    for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        Ok(self.push(shape, out, Op::MatMul, vec![a, b]))
    }

    // ---- shape manipulation -------------------------------------------

    pub fn slice(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Result<Value, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(GradError::BadAttr {
                op: "slice".into(),
                reason: format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Slice { axis, start, len }, vec![x]))
    }

    pub fn concat(&mut self, xs: &[Value], axis: usize) -> Result<Value, GradError> {
        let first = xs.first().ok_or_else(|| GradError::Arity { op: "concat".into(), expected: 1, got: 0 })?;
        let base = self.shape(*first).to_vec();
        let shapes: Vec<Shape> = xs.iter().map(|&x| self.shape(x).to_vec()).collect();
        if axis >= base.len() {
            return Err(GradError::ShapeMismatch { op: "concat", shapes });
        }
        for s in &shapes {
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GradError::ShapeMismatch { op: "concat", shapes });
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, s) in xs.iter().zip(&shapes) {
                let n = s[axis];
                out.extend_from_slice(&self.data(*x)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Ok(self.push(out_shape, out, Op::Concat(axis), xs.to_vec()))
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value, GradError> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(GradError::ShapeMismatch { op: "reshape", shapes: vec![self.shape(x).to_vec(), shape.to_vec()] });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape, vec![x]))
    }

    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast(&mut self, x: Value, shape: &[usize]) -> Result<Value, GradError> {
        let src = self.shape(x).to_vec();
        let ok = src.len() <= shape.len()
            && broadcast_shapes(&src, shape).as_deref() == Some(shape);
        if !ok {
            return Err(GradError::ShapeMismatch { op: "broadcast", shapes: vec![src, shape.to_vec()] });
        }
        let strides = aligned_strides(&src, shape);
        let zero = vec![0; shape.len()];
        let d = self.data(x);
        let mut out = vec![S::zero(); numel(shape)];
        for_each_broadcast(shape, &strides, &zero, |o, i, _| out[o] = d[i]);
        Ok(self.push(shape.to_vec(), out, Op::Broadcast, vec![x]))
    }

    pub fn permute(&mut self, x: Value, perm: &[usize]) -> Result<Value, GradError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(GradError::BadAttr { op: "permute".into(), reason: format!("{perm:?} for {shape:?}") });
        }
        let out_shape: Shape = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = row_major_strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zero = vec![0; shape.len()];
        let d = self.data(x);
        let mut out = vec![S::zero(); d.len()];
        for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| out[o] = d[i]);
        Ok(self.push(out_shape, out, Op::Permute(perm.to_vec()), vec![x]))
    }

    // ---- softmax family -------------------------------------------------

    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value, GradError> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Value, axis: usize) -> Result<Value, GradError> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Value, axis: usize, log: bool) -> Result<Value, GradError> {
        let shape = self.shape(x).to_vec();
        let op = if log { Op::LogSoftmax(axis) } else { Op::Softmax(axis) };
        if axis >= shape.len() {
            return Err(GradError::BadAttr { op: op.tag().into(), reason: format!("axis {axis} of {shape:?}") });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![S::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut m = S::neg_infinity();
                for k in 0..n {
                    m = m.max(d[at(k)]);
                }
                let mut z = S::zero();
                for k in 0..n {
                    z += (d[at(k)] - m).exp();
                }
                let lz = z.ln() + m;
                for k in 0..n {
                    out[at(k)] = if log { d[at(k)] - lz } else { (d[at(k)] - lz).exp() };
                }
            }
        }
        Ok(self.push(shape, out, op, vec![x]))
    }

    // ---- convolution ----------------------------------------------------

    /// Cross-correlation of `x: [Ci,H,W]` with `w: [Co,Ci,Kh,Kw]` plus `b: [Co]`.
    pub fn conv2d(&mut self, x: Value, w: Value, b: Value, stride: usize, pad: usize) -> Result<Value, GradError> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let mismatch = || GradError::ShapeMismatch { op: "conv2d", shapes: vec![sx.clone(), sw.clone(), sb.clone()] };
        if sx.len() != 3 || sw.len() != 4 || sb != [sw[0]] || sw[1] != sx[0] {
            return Err(mismatch());
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = conv_out(h, kh, stride, pad).ok_or_else(mismatch)?;
        let ow = conv_out(wd, kw, stride, pad).ok_or_else(mismatch)?;
        let (dx, dw, db) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![S::zero(); co * oh * ow];
        for o in 0..co {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = db[o]);
            for c in 0..ci {
                let src = &dx[c * h * wd..(c + 1) * h * wd];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = dw[((o * ci + c) * kh + ky) * kw + kx];
                        let (x0, x1) = valid_range(ow, wd, kx, stride, pad);
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let row = &src[iy * wd..(iy + 1) * wd];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = x0 + kx - pad;
                                for (d, &s) in dst[x0..x1].iter_mut().zip(&row[ix0..ix0 + (x1 - x0)]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    dst[ox] += wv * row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![co, oh, ow], out, Op::Conv2d { stride, pad }, vec![x, w, b]))
    }

    // ---- backward -------------------------------------------------------

    /// Adds `d root / d v` into the gradient of every reachable node that
    /// requires gradients. Calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Value) -> Result<(), GradError> {
        let shape = self.shape(root).to_vec();
        if numel(&shape) != 1 {
            return Err(GradError::NonScalarRoot(shape));
        }
        if !self.nodes[root.id()].requires_grad {
            return Ok(());
        }
        let n = root.id() + 1;
        let mut reachable = vec![false; n];
        reachable[root.id()] = true;
        for i in (0..n).rev() {
            if reachable[i] {
                for inp in &self.nodes[i].inputs {
                    if self.nodes[inp.id()].requires_grad {
                        reachable[inp.id()] = true;
                    }
                }
            }
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        adj[root.id()] = Some(vec![S::one()]);
        for i in (0..n).rev() {
            let Some(up) = adj[i].take() else { continue };
            self.vjp(i, &up, &mut adj);
            let node = &mut self.nodes[i];
            if node.grad.len() != node.data.len() {
                node.grad = vec![S::zero(); node.data.len()];
            }
            for (g, u) in node.grad.iter_mut().zip(&up) {
                *g += *u;
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, up: &[S], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let needs = |k: usize| self.nodes[ins[k].id()].requires_grad;
        // Buffers are taken out of `adj` while written and put back after,
        // so two inputs aliasing one node (x*x) both accumulate.
        let take = |k: usize, adj: &mut [Option<Vec<S>>]| {
            let id = ins[k].id();
            adj[id].take().unwrap_or_else(|| vec![S::zero(); self.nodes[id].data.len()])
        };
        let put = |k: usize, g: Vec<S>, adj: &mut [Option<Vec<S>>]| adj[ins[k].id()] = Some(g);
        let y = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (ins[0], ins[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (da, db) = (self.data(a), self.data(b));
                let out = &node.shape;
                let (ta, tb) = (aligned_strides(sa, out), aligned_strides(sb, out));
                let op = &node.op;
                let partials = |x: S, z: S| -> (S, S) {
                    match op {
                        Op::Add => (S::one(), S::one()),
                        Op::Sub => (S::one(), -S::one()),
                        Op::Mul => (z, x),
                        _ => (S::one() / z, -x / (z * z)),
                    }
                };
                if needs(0) {
                    let mut ga = take(0, adj);
                    if sa == sb && matches!(op, Op::Add | Op::Sub) {
                        for (g, &u) in ga.iter_mut().zip(up) {
                            *g += u;
                        }
                    } else {
                        for_each_broadcast(out, &ta, &tb, |o, ia, ib| ga[ia] += up[o] * partials(da[ia], db[ib]).0);
                    }
                    put(0, ga, adj);
                }
                if needs(1) {
                    let mut gb = take(1, adj);
                    if sa == sb && matches!(op, Op::Add) {
                        for (g, &u) in gb.iter_mut().zip(up) {
                            *g += u;
                        }
                    } else {
                        for_each_broadcast(out, &ta, &tb, |o, ia, ib| gb[ib] += up[o] * partials(da[ia], db[ib]).1);
                    }
                    put(1, gb, adj);
                }
            }
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = (sa[0], sa[1]);
                let n = if sb.len() == 2 { sb[1] } else { 1 };
                let (da, db) = (self.data(a), self.data(b));
                if needs(0) {
                    let mut ga = take(0, adj);
                    for r in 0..m {
                        let u = &up[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[r * k + p] += u.iter().zip(brow).map(|(&x, &y)| x * y).sum::<S>();
                        }
                    }
                    put(0, ga, adj);
                }
                if needs(1) {
                    let mut gb = take(1, adj);
                    for r in 0..m {
                        let u = &up[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = da[r * k + p];
                            for (g, &uv) in gb[p * n..(p + 1) * n].iter_mut().zip(u) {
                                *g += av * uv;
                            }
                        }
                    }
                    put(1, gb, adj);
                }
            }
            Op::Sum | Op::Mean => {
                if needs(0) {
                    let mut g = take(0, adj);
                    let scale =
                        if matches!(node.op, Op::Mean) { S::one() / S::lit(g.len().max(1) as f64) } else { S::one() };
                    let u = up[0] * scale;
                    g.iter_mut().for_each(|v| *v += u);
                    put(0, g, adj);
                }
            }
            Op::SumAxis(axis) => {
                if needs(0) {
                    let (outer, n, inner) = split_axis(self.shape(ins[0]), *axis);
                    let mut g = take(0, adj);
                    for o in 0..outer {
                        let src = &up[o * inner..(o + 1) * inner];
                        for kk in 0..n {
                            let dst = &mut g[(o * n + kk) * inner..(o * n + kk + 1) * inner];
                            for (d, &u) in dst.iter_mut().zip(src) {
                                *d += u;
                            }
                        }
                    }
                    put(0, g, adj);
                }
            }
            Op::Exp
            | Op::Log
            | Op::Tanh
            | Op::Sigmoid
            | Op::Softplus
            | Op::Relu
            | Op::Abs
            | Op::Sqrt
            | Op::Square
            | Op::Neg
            | Op::Scale(_)
            | Op::Offset(_) => {
                if needs(0) {
                    let x = self.data(ins[0]);
                    let mut g = take(0, adj);
                    let op = &node.op;
                    for j in 0..g.len() {
                        let d = match op {
                            Op::Exp => y[j],
                            Op::Log => S::one() / x[j],
                            Op::Tanh => S::one() - y[j] * y[j],
                            Op::Sigmoid => y[j] * (S::one() - y[j]),
                            Op::Softplus => sigmoid(x[j]),
                            Op::Relu => {
                                if x[j] > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            // subgradient 0 at the kink
                            Op::Abs => {
                                if x[j] > S::zero() {
                                    S::one()
                                } else if x[j] < S::zero() {
                                    -S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Op::Sqrt => S::lit(0.5) / y[j],
                            Op::Square => S::lit(2.0) * x[j],
                            Op::Neg => -S::one(),
                            Op::Scale(c) => *c,
                            _ => S::one(),
                        };
                        g[j] += up[j] * d;
                    }
                    put(0, g, adj);
                }
            }
            Op::Slice { axis, start, len } => {
                if needs(0) {
                    let (outer, n, inner) = split_axis(self.shape(ins[0]), *axis);
                    let mut g = take(0, adj);
                    for o in 0..outer {
                        let dst = &mut g[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (d, &u) in dst.iter_mut().zip(&up[o * len * inner..(o + 1) * len * inner]) {
                            *d += u;
                        }
                    }
                    put(0, g, adj);
                }
            }
            Op::Concat(axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut at = 0;
                for k in 0..ins.len() {
                    let n = self.shape(ins[k])[*axis];
                    if needs(k) {
                        let mut g = take(k, adj);
                        for o in 0..outer {
                            let src = &up[(o * total + at) * inner..(o * total + at + n) * inner];
                            for (d, &u) in g[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += u;
                            }
                        }
                        put(k, g, adj);
                    }
                    at += n;
                }
            }
            Op::Reshape => {
                if needs(0) {
                    let mut g = take(0, adj);
                    for (d, &u) in g.iter_mut().zip(up) {
                        *d += u;
                    }
                    put(0, g, adj);
                }
            }
            Op::Broadcast | Op::Permute(_) => {
                if needs(0) {
                    let src = match &node.op {
                        Op::Permute(perm) => {
                            let in_strides = row_major_strides(self.shape(ins[0]));
                            perm.iter().map(|&p| in_strides[p]).collect()
                        }
                        _ => aligned_strides(self.shape(ins[0]), &node.shape),
                    };
                    let zero = vec![0; node.shape.len()];
                    let mut g = take(0, adj);
                    for_each_broadcast(&node.shape, &src, &zero, |o, i, _| g[i] += up[o]);
                    put(0, g, adj);
                }
            }
            Op::Softmax(axis) | Op::LogSoftmax(axis) => {
                if needs(0) {
                    let log = matches!(node.op, Op::LogSoftmax(_));
                    let (outer, n, inner) = split_axis(&node.shape, *axis);
                    let mut g = take(0, adj);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            if log {
                                let s: S = (0..n).map(|k| up[at(k)]).sum();
                                for k in 0..n {
                                    g[at(k)] += up[at(k)] - y[at(k)].exp() * s;
                                }
                            } else {
                                let s: S = (0..n).map(|k| up[at(k)] * y[at(k)]).sum();
                                for k in 0..n {
                                    g[at(k)] += y[at(k)] * (up[at(k)] - s);
                                }
                            }
                        }
                    }
                    put(0, g, adj);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (x, w) = (ins[0], ins[1]);
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let (dx, dw) = (self.data(x), self.data(w));
                if needs(2) {
                    let mut gb = take(2, adj);
                    for o in 0..co {
                        gb[o] += up[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum::<S>();
                    }
                    put(2, gb, adj);
                }
                let mut gx = needs(0).then(|| take(0, adj));
                let mut gw = needs(1).then(|| take(1, adj));
                if gx.is_none() && gw.is_none() {
                    return;
                }
                for o in 0..co {
                    let plane = &up[o * oh * ow..(o + 1) * oh * ow];
                    for c in 0..ci {
                        let src = &dx[c * h * wd..(c + 1) * h * wd];
                        for ky in 0..kh {
                            let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                            for kx in 0..kw {
                                let widx = ((o * ci + c) * kh + ky) * kw + kx;
                                let wv = dw[widx];
                                let (x0, x1) = valid_range(ow, wd, kx, stride, pad);
                                let mut wacc = S::zero();
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - pad;
                                    let urow = &plane[oy * ow..(oy + 1) * ow];
                                    if stride == 1 {
                                        let ix0 = x0 + kx - pad;
                                        let n = x1 - x0;
                                        let srow = &src[iy * wd + ix0..iy * wd + ix0 + n];
                                        if gw.is_some() {
                                            wacc += urow[x0..x1].iter().zip(srow).map(|(&u, &s)| u * s).sum::<S>();
                                        }
                                        if let Some(gx) = gx.as_mut() {
                                            let base = c * h * wd + iy * wd + ix0;
                                            for (d, &u) in gx[base..base + n].iter_mut().zip(&urow[x0..x1]) {
                                                *d += wv * u;
                                            }
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            let ix = ox * stride + kx - pad;
                                            wacc += urow[ox] * src[iy * wd + ix];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[c * h * wd + iy * wd + ix] += wv * urow[ox];
                                            }
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += wacc;
                                }
                            }
                        }
                    }
                }
                if let Some(g) = gx {
                    put(0, g, adj);
                }
                if let Some(g) = gw {
                    put(1, g, adj);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) without overflow
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}
