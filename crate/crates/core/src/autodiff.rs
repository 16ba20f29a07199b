//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the computation record for one forward pass: every
//! primitive application appends a node holding the operation, the ids of
//! its inputs, and its output value. Because inputs must already exist when
//! an operation is recorded, the node list is topologically ordered by
//! construction, and [`Graph::backward`] is a single reverse sweep.
//!
//! Shapes are never broadcast. The only mixed-size arithmetic is
//! [`Graph::scale`], which multiplies by a compile-time scalar attribute.
//!
//! ```
//! use bitta_core::autodiff::Graph;
//! use bitta_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{interp_taps, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Differentiable input (parameters).
    Leaf,
    /// Input that never receives a gradient (data).
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    /// Inputs: `[C_in, H, W]` image, `[C_out, C_in, KH, KW]` kernel, `[C_out]` bias.
    Conv2d {
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Relu,
    Sigmoid,
    Abs,
    /// `max(0, x - c)`.
    Hinge(f64),
    Sum,
    Mean,
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    /// Endpoint-aligned linear resampling of a vector to `len` points.
    Interp1d {
        len: usize,
    },
    /// Non-overlapping mean pooling over the last two axes of `[C, H, W]`.
    AvgPool {
        window: (usize, usize),
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Hinge(_) => "hinge",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concatenate",
            Op::Interp1d { .. } => "interp1d",
            Op::AvgPool { .. } => "avg_pool",
        }
    }

    fn is_input(&self) -> bool {
        matches!(self, Op::Leaf | Op::Constant)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// One entry of the computation record.
#[derive(Debug, Clone, Copy)]
pub struct Record<'a> {
    pub op: &'a Op,
    pub inputs: &'a [NodeId],
    pub output: NodeId,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.entries.get_mut(id.0).and_then(Option::take)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn records(&self) -> impl Iterator<Item = Record<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| Record {
            op: &n.op,
            inputs: &n.inputs,
            output: NodeId(i),
        })
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, Vec::new(), value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Constant, Vec::new(), value, false)
    }

    fn push_raw(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Tensor,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records `op` applied to `inputs`.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op.is_input() {
            return Err(Error::InvalidOperand {
                op: op.name(),
                reason: "inputs are created with leaf() or constant()".into(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id.0));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push_raw(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale(factor), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride, padding }, &[input, kernel, bias])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[a])
    }

    pub fn hinge(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        self.apply(Op::Hinge(threshold), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, len }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn interp1d(&mut self, a: NodeId, len: usize) -> Result<NodeId> {
        self.apply(Op::Interp1d { len }, &[a])
    }

    pub fn avg_pool(&mut self, a: NodeId, window: (usize, usize)) -> Result<NodeId> {
        self.apply(Op::AvgPool { window }, &[a])
    }

    /// Replaces the value of an input node. Call [`Graph::replay`] afterwards
    /// to refresh dependent values.
    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id.0))?;
        if !node.op.is_input() {
            return Err(Error::InvalidOperand {
                op: node.op.name(),
                reason: "only leaf and constant nodes can be reassigned".into(),
            });
        }
        if node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_input",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every recorded operation from the current input values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_input() {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let values: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|id| &self.nodes[id.0].value)
                    .collect();
                forward(&node.op, &values)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Leaves that the loss does not depend on get an all-zero gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.nodes.get(loss.0).ok_or(Error::UnknownNode(loss.0))?;
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.op.is_input() || !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|id| &self.nodes[id.0].value)
                .collect();
            let wanted: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let partials = backward_op(&node.op, &inputs, &node.value, &gout, &wanted);
            for ((id, partial), want) in node.inputs.iter().zip(partials).zip(wanted) {
                let (Some(partial), true) = (partial, want) else {
                    continue;
                };
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&partial).for_each(|(a, p)| *a += p),
                    slot @ None => *slot = Some(partial),
                }
            }
            // Keep the consumed gradient around for inspection.
            grads[i] = Some(gout);
        }
        let entries = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (None, Op::Leaf) => Some(Tensor::zeros(node.value.shape())),
                (None, _) => None,
            })
            .collect();
        Ok(Gradients { entries })
    }
}

fn shape_err(op: &Op, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn operand_err(op: &Op, reason: impl Into<String>) -> Error {
    Error::InvalidOperand {
        op: op.name(),
        reason: reason.into(),
    }
}

fn arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(operand_err(
            op,
            format!("expects {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn same_shape<'a>(op: &Op, inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor)> {
    arity(op, inputs, 2)?;
    let (a, b) = (inputs[0], inputs[1]);
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok((a, b))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, extent, inner)` view of a tensor split around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: (usize, usize),
    padding: (usize, usize),
}

impl ConvGeometry {
    fn new(op: &Op, input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let Op::Conv2d { stride, padding } = *op else {
            unreachable!()
        };
        if input.rank() != 3 || kernel.rank() != 4 {
            return Err(shape_err(op, input.shape(), kernel.shape()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(operand_err(op, "stride must be positive"));
        }
        let (c_in, in_h, in_w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, k_c, k_h, k_w) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if k_c != c_in || in_h + 2 * padding.0 < k_h || in_w + 2 * padding.1 < k_w {
            return Err(shape_err(op, input.shape(), kernel.shape()));
        }
        if bias.shape() != [c_out] {
            return Err(shape_err(op, kernel.shape(), bias.shape()));
        }
        Ok(ConvGeometry {
            c_in,
            c_out,
            in_h,
            in_w,
            k_h,
            k_w,
            out_h: (in_h + 2 * padding.0 - k_h) / stride.0 + 1,
            out_w: (in_w + 2 * padding.1 - k_w) / stride.1 + 1,
            stride,
            padding,
        })
    }

    /// Output positions `o` with `0 <= o * stride + k - pad < in_len`.
    fn valid(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k {
            (pad - k).div_ceil(stride)
        } else {
            0
        };
        let hi = if in_len + pad > k {
            ((in_len - 1 + pad - k) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visits every (kernel tap, output row) pair with its input row and the
    /// matching column span, calling `f(co, ci, kh, kw, oh, ih, ow_lo, ow_hi)`.
    #[allow(clippy::too_many_arguments)]
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize),
    ) {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for kh in 0..self.k_h {
                    let (oh_lo, oh_hi) = Self::valid(self.out_h, self.in_h, kh, sh, ph);
                    for kw in 0..self.k_w {
                        let (ow_lo, ow_hi) = Self::valid(self.out_w, self.in_w, kw, sw, pw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * sh + kh - ph;
                            f(co, ci, kh, kw, oh, ih, ow_lo, ow_hi);
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the reduction can
/// pipeline. Summation order is fixed, so results are reproducible.
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, a_rest) = a.split_at(a.len() / 4 * 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_rest.iter().zip(b_rest) {
        sum += x * y;
    }
    sum
}

fn conv2d_forward(op: &Op, input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let geo = ConvGeometry::new(op, input, kernel, bias)?;
    let (x, k) = (input.data(), kernel.data());
    let plane = geo.out_h * geo.out_w;
    let mut out = vec![0.0; geo.c_out * plane];
    for (co, &b) in bias.data().iter().enumerate() {
        out[co * plane..(co + 1) * plane].fill(b);
    }
    let sw = geo.stride.1;
    let pw = geo.padding.1;
    geo.for_each_tap(|co, ci, kh, kw, oh, ih, ow_lo, ow_hi| {
        let w = k[((co * geo.c_in + ci) * geo.k_h + kh) * geo.k_w + kw];
        let x_row = &x[(ci * geo.in_h + ih) * geo.in_w..][..geo.in_w];
        let o_row = &mut out[(co * geo.out_h + oh) * geo.out_w..][..geo.out_w];
        if sw == 1 {
            let shift = kw as isize - pw as isize;
            let src = &x_row[(ow_lo as isize + shift) as usize..(ow_hi as isize + shift) as usize];
            for (o, &v) in o_row[ow_lo..ow_hi].iter_mut().zip(src) {
                *o += w * v;
            }
        } else {
            for ow in ow_lo..ow_hi {
                o_row[ow] += w * x_row[ow * sw + kw - pw];
            }
        }
    });
    Ok(Tensor::from_parts(
        vec![geo.c_out, geo.out_h, geo.out_w],
        out,
    ))
}

fn conv2d_backward(
    op: &Op,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    gout: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let geo = ConvGeometry::new(op, input, kernel, bias).expect("validated in forward");
    let (x, k) = (input.data(), kernel.data());
    let mut gx = wanted[0].then(|| vec![0.0; x.len()]);
    let mut gk = wanted[1].then(|| vec![0.0; k.len()]);
    let sw = geo.stride.1;
    let pw = geo.padding.1;
    if gx.is_some() || gk.is_some() {
        geo.for_each_tap(|co, ci, kh, kw, oh, ih, ow_lo, ow_hi| {
            let k_idx = ((co * geo.c_in + ci) * geo.k_h + kh) * geo.k_w + kw;
            let x_off = (ci * geo.in_h + ih) * geo.in_w;
            let g_row = &gout[(co * geo.out_h + oh) * geo.out_w..][..geo.out_w];
            if sw == 1 {
                let lo = x_off + ow_lo + kw - pw;
                let g_seg = &g_row[ow_lo..ow_hi];
                if let Some(gk) = gk.as_mut() {
                    gk[k_idx] += dot_lanes(g_seg, &x[lo..lo + g_seg.len()]);
                }
                if let Some(gx) = gx.as_mut() {
                    let w = k[k_idx];
                    for (d, &g) in gx[lo..lo + g_seg.len()].iter_mut().zip(g_seg) {
                        *d += w * g;
                    }
                }
                return;
            }
            let iw_of = |ow: usize| ow * sw + kw - pw;
            if let Some(gk) = gk.as_mut() {
                let mut acc = 0.0;
                for ow in ow_lo..ow_hi {
                    acc += g_row[ow] * x[x_off + iw_of(ow)];
                }
                gk[k_idx] += acc;
            }
            if let Some(gx) = gx.as_mut() {
                let w = k[k_idx];
                for ow in ow_lo..ow_hi {
                    gx[x_off + iw_of(ow)] += w * g_row[ow];
                }
            }
        });
    }
    let gb = wanted[2].then(|| {
        let plane = geo.out_h * geo.out_w;
        (0..geo.c_out)
            .map(|co| gout[co * plane..(co + 1) * plane].iter().sum())
            .collect()
    });
    vec![gx, gk, gb]
}

/// Evaluates one primitive. Pure: identical inputs give bitwise-identical
/// outputs.
pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf | Op::Constant => Err(operand_err(op, "input nodes have no forward rule")),
        Op::Add => {
            let (a, b) = same_shape(op, inputs)?;
            Ok(zip_map(a, b, |x, y| x + y))
        }
        Op::Sub => {
            let (a, b) = same_shape(op, inputs)?;
            Ok(zip_map(a, b, |x, y| x - y))
        }
        Op::Mul => {
            let (a, b) = same_shape(op, inputs)?;
            Ok(zip_map(a, b, |x, y| x * y))
        }
        Op::Scale(s) => {
            arity(op, inputs, 1)?;
            Ok(map(inputs[0], |x| s * x))
        }
        Op::MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(op, a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    let b_row = &b.data()[p * n..(p + 1) * n];
                    for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::Conv2d { .. } => {
            arity(op, inputs, 3)?;
            conv2d_forward(op, inputs[0], inputs[1], inputs[2])
        }
        Op::Relu => {
            arity(op, inputs, 1)?;
            Ok(map(inputs[0], |x| if x > 0.0 { x } else { 0.0 }))
        }
        Op::Sigmoid => {
            arity(op, inputs, 1)?;
            Ok(map(inputs[0], sigmoid))
        }
        Op::Abs => {
            arity(op, inputs, 1)?;
            Ok(map(inputs[0], f64::abs))
        }
        Op::Hinge(c) => {
            arity(op, inputs, 1)?;
            Ok(map(inputs[0], |x| if x > *c { x - c } else { 0.0 }))
        }
        Op::Sum => {
            arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Op::Mean => {
            arity(op, inputs, 1)?;
            let t = inputs[0];
            Ok(Tensor::scalar(
                t.data().iter().sum::<f64>() / t.numel() as f64,
            ))
        }
        Op::Slice { axis, start, len } => {
            arity(op, inputs, 1)?;
            let t = inputs[0];
            if *axis >= t.rank() || *len == 0 || start + len > t.shape()[*axis] {
                return Err(operand_err(
                    op,
                    format!(
                        "range {start}..{} on axis {axis} of {:?}",
                        start + len,
                        t.shape()
                    ),
                ));
            }
            let (outer, extent, inner) = split_axis(t.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[*axis] = *len;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::Reshape(shape) => {
            arity(op, inputs, 1)?;
            let t = inputs[0];
            if shape.contains(&0) || shape.iter().product::<usize>() != t.numel() {
                return Err(shape_err(op, t.shape(), shape));
            }
            Ok(Tensor::from_parts(shape.clone(), t.data().to_vec()))
        }
        Op::Concat { axis } => {
            let Some(first) = inputs.first() else {
                return Err(operand_err(op, "needs at least one input"));
            };
            if *axis >= first.rank() {
                return Err(operand_err(op, format!("axis {axis} out of range")));
            }
            for t in &inputs[1..] {
                let compatible = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(shape_err(op, first.shape(), t.shape()));
                }
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::Interp1d { len } => {
            arity(op, inputs, 1)?;
            let t = inputs[0];
            if t.rank() != 1 || *len == 0 {
                return Err(shape_err(op, t.shape(), &[*len]));
            }
            let x = t.data();
            let out = interp_taps(x.len(), *len)
                .into_iter()
                .map(|(lo, hi, f)| (1.0 - f) * x[lo] + f * x[hi])
                .collect();
            Ok(Tensor::from_parts(vec![*len], out))
        }
        Op::AvgPool { window } => {
            arity(op, inputs, 1)?;
            let t = inputs[0];
            let (ph, pw) = *window;
            if t.rank() != 3 || ph == 0 || pw == 0 || t.shape()[1] < ph || t.shape()[2] < pw {
                return Err(shape_err(op, t.shape(), &[ph, pw]));
            }
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let (oh, ow) = (h / ph, w / pw);
            let norm = 1.0 / (ph * pw) as f64;
            let x = t.data();
            let mut out = vec![0.0; c * oh * ow];
            for ci in 0..c {
                for i in 0..oh * ph {
                    let row = &x[(ci * h + i) * w..][..ow * pw];
                    let o_row = &mut out[(ci * oh + i / ph) * ow..][..ow];
                    for (j, &v) in row.iter().enumerate() {
                        o_row[j / pw] += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= norm);
            Ok(Tensor::from_parts(vec![c, oh, ow], out))
        }
    }
}

/// Vector-Jacobian products for each input. Entries for inputs with
/// `wanted[i] == false` may be `None`.
fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        x.data().iter().zip(gout).map(|(&v, &g)| f(v, g)).collect()
    };
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
        Op::Sub => vec![Some(gout.to_vec()), Some(gout.iter().map(|g| -g).collect())],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                wanted[0].then(|| elementwise(b, &|v, g| v * g)),
                wanted[1].then(|| elementwise(a, &|v, g| v * g)),
            ]
        }
        Op::Scale(s) => vec![Some(gout.iter().map(|g| s * g).collect())],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = wanted[0].then(|| {
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let b_row = &b.data()[p * n..(p + 1) * n];
                        ga[i * k + p] = gout[i * n..(i + 1) * n]
                            .iter()
                            .zip(b_row)
                            .map(|(g, bv)| g * bv)
                            .sum();
                    }
                }
                ga
            });
            let gb = wanted[1].then(|| {
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        for (o, g) in gb[p * n..(p + 1) * n]
                            .iter_mut()
                            .zip(&gout[i * n..(i + 1) * n])
                        {
                            *o += av * g;
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        Op::Conv2d { .. } => conv2d_backward(op, inputs[0], inputs[1], inputs[2], gout, wanted),
        Op::Relu => vec![Some(elementwise(inputs[0], &|v, g| {
            if v > 0.0 {
                g
            } else {
                0.0
            }
        }))],
        Op::Sigmoid => {
            let g = output
                .data()
                .iter()
                .zip(gout)
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect();
            vec![Some(g)]
        }
        Op::Abs => vec![Some(elementwise(inputs[0], &|v, g| {
            if v > 0.0 {
                g
            } else if v < 0.0 {
                -g
            } else {
                0.0
            }
        }))],
        Op::Hinge(c) => vec![Some(elementwise(inputs[0], &|v, g| {
            if v > *c {
                g
            } else {
                0.0
            }
        }))],
        Op::Sum => vec![Some(vec![gout[0]; inputs[0].numel()])],
        Op::Mean => {
            let n = inputs[0].numel();
            vec![Some(vec![gout[0] / n as f64; n])]
        }
        Op::Slice { axis, start, len } => {
            let t = inputs[0];
            let (outer, extent, inner) = split_axis(t.shape(), *axis);
            let mut g = vec![0.0; t.numel()];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
            }
            vec![Some(g)]
        }
        Op::Reshape(_) => vec![Some(gout.to_vec())],
        Op::Concat { axis } => {
            let (outer, _, inner) = split_axis(inputs[0].shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let chunk = t.shape()[*axis] * inner;
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        g.extend_from_slice(&gout[base..base + chunk]);
                    }
                    offset += chunk;
                    Some(g)
                })
                .collect()
        }
        Op::Interp1d { len } => {
            let n = inputs[0].numel();
            let mut g = vec![0.0; n];
            for ((lo, hi, f), &go) in interp_taps(n, *len).into_iter().zip(gout) {
                g[lo] += (1.0 - f) * go;
                g[hi] += f * go;
            }
            vec![Some(g)]
        }
        Op::AvgPool { window } => {
            let t = inputs[0];
            let (ph, pw) = *window;
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let (oh, ow) = (h / ph, w / pw);
            let norm = 1.0 / (ph * pw) as f64;
            let mut g = vec![0.0; t.numel()];
            for ci in 0..c {
                for i in 0..oh * ph {
                    let g_row = &gout[(ci * oh + i / ph) * ow..][..ow];
                    let dst = &mut g[(ci * h + i) * w..][..ow * pw];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = g_row[j / pw] * norm;
                    }
                }
            }
            vec![Some(g)]
        }
    }
}
