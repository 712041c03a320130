//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough information to push gradients back to its inputs. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Domain kernels that are awkward to express with primitive ops (softmax
//! aggregation over correlation fields, reference correlations) plug in
//! through [`CustomOp`].

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation kinds. Binary kinds broadcast over trailing
/// dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Softplus,
    Tanh,
    Scale(f64),
    Shift(f64),
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
            Self::Tanh => "tanh",
            Self::Scale(_) => "scale",
            Self::Shift(_) => "shift",
        }
    }
}

/// A differentiable operation implemented outside the graph.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the graph only asks for the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means the
    /// op does not propagate into that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Upsample2x {
    src: Vec<usize>,
    c: usize,
}

impl CustomOp for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let c = self.c;
        let mut gx = vec![0.0; inputs[0].numel()];
        for (i, &j) in self.src.iter().enumerate() {
            for ch in 0..c {
                gx[j * c + ch] += gy[i * c + ch];
            }
        }
        vec![Some(gx)]
    }
}

enum Op {
    Leaf,
    Unary {
        x: Var,
        kind: ElementwiseOp,
    },
    Binary {
        a: Var,
        b: Var,
        kind: ElementwiseOp,
        // Flat input index for every output element, when broadcasting.
        amap: Option<Vec<usize>>,
        bmap: Option<Vec<usize>>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MatMul(Var, Var),
    Transpose(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation graph confined to one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let in_n = numel(in_shape);
    // Suffix broadcast (bias over channels, scalar) is the common case.
    let suffix = in_shape.len() <= out_shape.len()
        && out_shape[out_shape.len() - in_shape.len()..] == *in_shape;
    if suffix {
        return (0..n).map(|i| i % in_n).collect();
    }
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        let d = if i < pad { 1 } else { in_shape[i - pad] };
        in_strides[i] = if d == 1 { 0 } else { s };
        s *= d;
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(kind: ElementwiseOp, x: f64) -> f64 {
    match kind {
        ElementwiseOp::Sin => x.sin(),
        ElementwiseOp::Cos => x.cos(),
        ElementwiseOp::Exp => x.exp(),
        ElementwiseOp::Log => x.ln(),
        ElementwiseOp::Relu => x.max(0.0),
        ElementwiseOp::Sigmoid => sigmoid(x),
        ElementwiseOp::Softplus => softplus(x),
        ElementwiseOp::Tanh => x.tanh(),
        ElementwiseOp::Scale(k) => k * x,
        ElementwiseOp::Shift(k) => x + k,
        _ => unreachable!("binary kind in unary position"),
    }
}

/// d(out)/d(x) given input `x` and output `y`.
fn unary_derivative(kind: ElementwiseOp, x: f64, y: f64) -> f64 {
    match kind {
        ElementwiseOp::Sin => x.cos(),
        ElementwiseOp::Cos => -x.sin(),
        ElementwiseOp::Exp => y,
        ElementwiseOp::Log => 1.0 / x,
        ElementwiseOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ElementwiseOp::Sigmoid => y * (1.0 - y),
        ElementwiseOp::Softplus => sigmoid(x),
        ElementwiseOp::Tanh => 1.0 - y * y,
        ElementwiseOp::Scale(k) => k,
        ElementwiseOp::Shift(_) => 1.0,
        _ => unreachable!("binary kind in unary position"),
    }
}

pub(crate) fn conv2d_out_extent(extent: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (extent + 2 * pad - k) / stride + 1
}

/// Cross-correlation with zero "same" padding (`pad = k / 2`).
/// `x` is `H×W×Cin`, `kernel` is `k×k×Cin×Cout`.
pub fn conv2d_forward(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 3 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[2] || stride == 0 {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs.to_vec(), rhs: ks.to_vec() });
    }
    if ks[0] % 2 == 0 {
        return Err(Error::invalid(format!("conv2d kernel size must be odd, got {}", ks[0])));
    }
    let (h, w, cin) = (xs[0], xs[1], xs[2]);
    let (k, cout) = (ks[0], ks[3]);
    let pad = k / 2;
    let (ho, wo) = (conv2d_out_extent(h, k, stride), conv2d_out_extent(w, k, stride));
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * cout..][..cout];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xin = &xd[(iy as usize * w + ix as usize) * cin..][..cin];
                    let kbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * cout..][..cout];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([ho, wo, cout], out)
}

fn conv2d_backward(x: &Tensor, kernel: &Tensor, stride: usize, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (xs, ks) = (x.shape(), kernel.shape());
    let (h, w, cin) = (xs[0], xs[1], xs[2]);
    let (k, cout) = (ks[0], ks[3]);
    let pad = k / 2;
    let (ho, wo) = (conv2d_out_extent(h, k, stride), conv2d_out_extent(w, k, stride));
    let xd = x.data();
    let kd = kernel.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &gy[(oy * wo + ox) * cout..][..cout];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        let krow = &kd[kbase + ci * cout..][..cout];
                        let gkrow = &mut gk[kbase + ci * cout..][..cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += g[co] * krow[co];
                            gkrow[co] += xv * g[co];
                        }
                        gx[xoff + ci] += acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let m = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                y[at(j)] /= s;
            }
        }
    }
    y
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass, if `v` was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Element-wise operation; `b` is required for binary kinds and ignored
    /// otherwise.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        if !kind.is_binary() {
            let value = self.value(a).map(|x| unary_forward(kind, x));
            let rg = self.rg(a);
            return Ok(self.push(value, Op::Unary { x: a, kind }, rg));
        }
        let b = b.ok_or_else(|| Error::invalid(format!("{} needs two operands", kind.name())))?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or(Error::ShapeMismatch { op: kind.name(), lhs: sa.clone(), rhs: sb.clone() })?;
        let amap = (sa != out_shape).then(|| broadcast_map(&out_shape, &sa));
        let bmap = (sb != out_shape).then(|| broadcast_map(&out_shape, &sb));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let f = |x: f64, y: f64| match kind {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::Div => x / y,
            _ => unreachable!(),
        };
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let ia = amap.as_ref().map_or(i, |m| m[i]);
                let ib = bmap.as_ref().map_or(i, |m| m[i]);
                f(ad[ia], bd[ib])
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { a, b, kind, amap, bmap }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Div, a, Some(b))
    }

    fn unary(&mut self, kind: ElementwiseOp, x: Var) -> Var {
        self.elementwise(kind, x, None).expect("unary ops are total")
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Cos, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Softplus, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(ElementwiseOp::Scale(k), x)
    }

    pub fn shift(&mut self, x: Var, k: f64) -> Var {
        self.unary(ElementwiseOp::Shift(k), x)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, outer, len, inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// 2-D cross-correlation with "same" zero padding; see [`conv2d_forward`].
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(kernel), stride)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(value, Op::Conv2d { x, kernel, stride }, rg))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::invalid(format!("{op}: axis {axis} out of range for {shape:?}")));
        }
        Ok(axis_split(shape, axis))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis, "softmax")?;
        let y = softmax_forward(self.value(x).data(), outer, len, inner);
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis, "log_softmax")?;
        let xd = self.value(x).data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|j| (xd[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..len {
                    y[at(j)] = xd[at(j)] - lse;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax { x, outer, len, inner }, rg))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let value = Tensor::new([sa[0], sb[1]], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose needs a matrix, got {s:?}")));
        }
        let value = Tensor::new([s[1], s[0]], transpose(self.value(x).data(), s[0], s[1]))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("slice_last on a scalar"))?;
        if start >= end || end > c {
            return Err(Error::invalid(format!("slice_last: bad range {start}..{end} for {c} channels")));
        }
        let width = end - start;
        let xd = self.value(x).data();
        let data: Vec<f64> = xd.chunks_exact(c).flat_map(|row| row[start..end].iter().copied()).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceLast { x, start }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat_last of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != *lead {
                return Err(Error::ShapeMismatch { op: "concat_last", lhs: self.shape(*first).to_vec(), rhs: s.to_vec() });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..][..w]);
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let value = Tensor::new(out_shape, data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatLast(xs.to_vec()), rg))
    }

    /// Rows of the leading axis, in the given order (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::invalid(format!("select_rows: rows {rows:?} invalid for {shape:?}")));
        }
        let row_len: usize = shape[1..].iter().product();
        let xd = self.value(x).data();
        let data: Vec<f64> = rows.iter().flat_map(|&r| xd[r * row_len..][..row_len].iter().copied()).collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Non-overlapping `factor×factor` average pooling of an `H×W×C` map.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 || s[0] % factor != 0 || s[1] % factor != 0 {
            return Err(Error::invalid(format!("avg_pool: factor {factor} does not tile {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / factor, w / factor);
        let xd = self.value(x).data();
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / factor) * wo + xx / factor) * c;
                for ch in 0..c {
                    out[o + ch] += xd[(y * w + xx) * c + ch] * norm;
                }
            }
        }
        let value = Tensor::new([ho, wo, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, factor }, rg))
    }

    /// Nearest-neighbour upsampling of an `h×w×C` map to `out_h×out_w`, where
    /// output pixel `(y, x)` copies input `(y/2, x/2)`. Requires
    /// `ceil(out/2) == in` on both axes, which inverts a stride-2 convolution.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h.div_ceil(2) != s[0] || out_w.div_ceil(2) != s[1] {
            return Err(Error::invalid(format!("upsample2x: cannot map {s:?} to {out_h}x{out_w}")));
        }
        let (w, c) = (s[1], s[2]);
        let src: Vec<usize> = (0..out_h * out_w).map(|i| (i / out_w / 2) * w + (i % out_w) / 2).collect();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for &j in &src {
            out.extend_from_slice(&xd[j * c..][..c]);
        }
        let value = Tensor::new([out_h, out_w, c], out)?;
        Ok(self.custom(&[x], value, Upsample2x { src, c }))
    }

    /// Appends a node whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: impl CustomOp + 'static) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op: Box::new(op) }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Runs at most once per graph until
    /// [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let contributions = self.local_backward(i, &gy);
            for (v, g) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], g);
                }
            }
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary { x, kind } => {
                let xd = self.value(*x).data();
                let g = xd.iter().zip(y).zip(gy).map(|((&xv, &yv), &g)| g * unary_derivative(*kind, xv, yv)).collect();
                vec![(*x, g)]
            }
            Op::Binary { a, b, kind, amap, bmap } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for (o, &g) in gy.iter().enumerate() {
                    let ia = amap.as_ref().map_or(o, |m| m[o]);
                    let ib = bmap.as_ref().map_or(o, |m| m[o]);
                    let (da, db) = match kind {
                        ElementwiseOp::Add => (1.0, 1.0),
                        ElementwiseOp::Sub => (1.0, -1.0),
                        ElementwiseOp::Mul => (bd[ib], ad[ia]),
                        ElementwiseOp::Div => (1.0 / bd[ib], -ad[ia] / (bd[ib] * bd[ib])),
                        _ => unreachable!(),
                    };
                    ga[ia] += g * da;
                    gb[ib] += g * db;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(x) => vec![(*x, vec![gy[0]; self.value(*x).numel()])],
            Op::SumAxis { x, outer, len, inner } => {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for j in 0..*len {
                        for k in 0..*inner {
                            g[(o * len + j) * inner + k] = gy[o * inner + k];
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::Conv2d { x, kernel, stride } => {
                let (gx, gk) = conv2d_backward(self.value(*x), self.value(*kernel), *stride, gy);
                vec![(*x, gx), (*kernel, gk)]
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut g = vec![0.0; y.len()];
                for o in 0..*outer {
                    for k in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + k;
                        let dot: f64 = (0..*len).map(|j| y[at(j)] * gy[at(j)]).sum();
                        for j in 0..*len {
                            g[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let mut g = vec![0.0; y.len()];
                for o in 0..*outer {
                    for k in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + k;
                        let total: f64 = (0..*len).map(|j| gy[at(j)]).sum();
                        for j in 0..*len {
                            g[at(j)] = gy[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose(self.value(*b).data(), k, n);
                let ga = matmul(gy, &bt, m, n, k);
                let at = transpose(self.value(*a).data(), m, k);
                let gb = matmul(&at, gy, k, m, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                vec![(*x, transpose(gy, s[1], s[0]))]
            }
            Op::SliceLast { x, start } => {
                let c = *self.shape(*x).last().unwrap();
                let width = *node.value.shape().last().unwrap();
                let mut g = vec![0.0; self.value(*x).numel()];
                for (r, row) in gy.chunks_exact(width).enumerate() {
                    g[r * c + start..][..width].copy_from_slice(row);
                }
                vec![(*x, g)]
            }
            Op::ConcatLast(xs) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &v in xs {
                    let w = *self.shape(v).last().unwrap();
                    let g: Vec<f64> = gy.chunks_exact(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect();
                    out.push((v, g));
                    offset += w;
                }
                out
            }
            Op::SelectRows { x, rows } => {
                let xs = self.value(*x);
                let row_len = xs.numel() / xs.shape()[0];
                let mut g = vec![0.0; xs.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..row_len {
                        g[r * row_len + j] += gy[k * row_len + j];
                    }
                }
                vec![(*x, g)]
            }
            Op::AvgPool { x, factor } => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                let wo = w / factor;
                let norm = 1.0 / (factor * factor) as f64;
                let mut g = vec![0.0; h * w * c];
                for yy in 0..h {
                    for xx in 0..w {
                        let o = ((yy / factor) * wo + xx / factor) * c;
                        for ch in 0..c {
                            g[(yy * w + xx) * c + ch] = gy[o + ch] * norm;
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, &node.value, gy);
                debug_assert_eq!(grads.len(), inputs.len(), "{} returned wrong arity", op.name());
                inputs.iter().zip(grads).filter_map(|(&v, g)| g.map(|g| (v, g))).collect()
            }
        }
    }
}

/// Compares reverse-mode gradients of `f` with respect to every input tensor
/// against central differences with step `h`.
///
/// Returns `max |autodiff − fd| / max(1, |fd|)` over all coordinates. The
/// reported coordinate index in [`Error::NonFinite`] is global across inputs,
/// in input order.
pub fn check_gradients_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], Tensor::into_data))
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut global = 0;
    for t in 0..inputs.len() {
        for j in 0..inputs[t].numel() {
            let orig = inputs[t].data()[j];
            work[t].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[t].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[t].data_mut()[j] = orig;
            let a = analytic[t][j];
            if !up.is_finite() || !down.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { index: global });
            }
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
            global += 1;
        }
    }
    Ok(worst)
}

/// Single-input form of [`check_gradients_many`].
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_gradients_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}
